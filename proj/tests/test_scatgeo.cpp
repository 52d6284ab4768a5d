#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "sgcalc/scatgeo.hpp"

using namespace sgcalc;

namespace {

Matrix test_L(int n) { return n == 1 ? Matrix{{2.0}} : Matrix{{2.0, 0.0}, {0.0, 1.0}}; }
Matrix test_S(int n) { return n == 1 ? Matrix{{1.0}} : Matrix{{1.0, 1.0}, {1.0, 2.0}}; }

std::vector<CanonicalMap> families(int n) {
  return {identity_map(n), dilation_map(n, 2.0), linear_map(test_L(n)), shear_map(test_S(n)),
          compose_maps(shear_map(test_S(n)), linear_map(test_L(n)))};
}

// h0(x) = x.Sx/|x| and its gradient, by hand.
double h0(const Matrix& S, const double* x, int n) {
  double q = 0.0, r = 0.0;
  for (int i = 0; i < n; ++i) {
    r += x[i] * x[i];
    for (int j = 0; j < n; ++j) q += x[i] * S[i][j] * x[j];
  }
  return q / std::sqrt(r);
}

std::vector<double> grad_h0(const Matrix& S, const double* x, int n) {
  double q = 0.0, r2 = 0.0;
  std::vector<double> Sx(n, 0.0);
  for (int i = 0; i < n; ++i) {
    r2 += x[i] * x[i];
    for (int j = 0; j < n; ++j) Sx[i] += S[i][j] * x[j];
  }
  for (int i = 0; i < n; ++i) q += x[i] * Sx[i];
  const double r = std::sqrt(r2);
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = 2.0 * Sx[i] / r - q * x[i] / (r2 * r);
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Compactify, OriginHasRhoOne) {
  auto c = radial_compactify({0.0, 0.0});
  EXPECT_EQ(c.rho, 1.0);
  EXPECT_TRUE(c.interior);
  EXPECT_TRUE(c.origin);
  EXPECT_EQ(c.omega[0], 1.0);
}

TEST(Compactify, RayApproachesBoundary) {
  double prev = 1.0;
  for (double t : {1.0, 10.0, 1e3, 1e6, 1e9}) {
    auto c = radial_compactify({0.6 * t, -0.8 * t});
    EXPECT_LT(c.rho, prev);
    EXPECT_NEAR(c.rho, 1.0 / std::sqrt(1.0 + t * t), 1e-15);
    EXPECT_NEAR(c.omega[0], 0.6, 1e-15);
    EXPECT_NEAR(c.omega[1], -0.8, 1e-15);
    prev = c.rho;
  }
}

TEST(Compactify, RoundTripThreeFour) {
  auto c = radial_compactify({3.0, 4.0});
  EXPECT_NEAR(c.rho, 1.0 / std::sqrt(26.0), 1e-15);
  auto x = radial_decompactify(c);
  EXPECT_NEAR(x[0], 3.0, 1e-12);
  EXPECT_NEAR(x[1], 4.0, 1e-12);
}

TEST(Compactify, RoundTripRandom) {
  for (auto& p : oracle::random_points(2, 200, 50.0)) {
    auto x = radial_decompactify(radial_compactify({p.x[0], p.x[1]}));
    EXPECT_NEAR(x[0], p.x[0], 1e-12 * std::max(1.0, std::abs(p.x[0])));
    EXPECT_NEAR(x[1], p.x[1], 1e-12 * std::max(1.0, std::abs(p.x[1])));
  }
}

TEST(Compactify, BoundaryHasNoPreimage) {
  auto b = boundary_point({3.0, 4.0});
  EXPECT_EQ(b.rho, 0.0);
  EXPECT_FALSE(b.interior);
  EXPECT_NEAR(b.omega[0], 0.6, 1e-15);
  EXPECT_THROW(radial_decompactify(b), BoundaryPoint);
}

// ---------------------------------------------------------------------------

TEST(Jmap, LambdaIsOneOnAllFaces) {
  for (int n : {1, 2})
    for (BiOrder m : {BiOrder{1, 1}, BiOrder{2, -1}, BiOrder{-1, 0}}) {
      auto d = jmap(lambda_classical(m, n));
      for (auto& f : d) {
        for (auto v : f.values) EXPECT_NEAR(std::abs(v - 1.0), 0.0, 1e-9);
        for (auto v : f.corner_values) EXPECT_NEAR(std::abs(v - 1.0), 0.0, 1e-9);
      }
    }
}

TEST(Jmap, XTimesJapXiGivesFirstSphereCoordinate) {
  for (int n : {1, 2}) {
    auto d = jmap(classical(make_symbol(Expr::x(0) * jap_xi(n), n, {1, 1})), Face::e);
    for (std::size_t i = 0; i < d.samples.size(); ++i) EXPECT_NEAR(d.values[i].real(), d.samples[i].x[0], 1e-9);
  }
}

TEST(Jmap, AgreesWithPrincipalLimit) {
  for (int n : {1, 2}) {
    auto x = Expr::x(0), xi = Expr::xi(0);
    std::vector<SymbolExpr> battery = {
        make_symbol(x * jap_xi(n), n, {1, 1}),
        make_symbol(x * xi * inv(jap_x(n)) * inv(jap_xi(n)) + Expr(1.0), n, {0, 0}),
        make_symbol(jap_x(n) * jap_xi(n) + x, n, {1, 1}),
        make_symbol(pow(jap_x(n), 2) * inv(jap_xi(n)) + x * xi * inv(pow(jap_xi(n), 2)), n, {2, -1}),
    };
    for (auto& s : battery) {
      auto a = classical(s);
      for (Face f : {Face::e, Face::psi, Face::psie}) {
        auto d = jmap(a, f);
        auto pl = principal_limit(s, f);
        double worst = 0.0;
        for (std::size_t i = 0; i < d.samples.size(); ++i)
          worst = std::max(worst, std::abs(d.principal_value(i) - pl(d.samples[i])));
        EXPECT_LT(worst, 1e-6) << face_name(f);
      }
    }
  }
}

TEST(Jmap, ApproachSamplesConverge) {
  auto d = jmap(classical(make_symbol(Expr::x(0) * jap_xi(2), 2, {1, 1})), Face::e);
  std::vector<double> gap;
  for (auto& row : d.near) {
    double g = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) g = std::max(g, std::abs(row[i] - d.values[i]));
    gap.push_back(g);
  }
  // rho <x> = sqrt(1 - rho^2): the gap is 1 - sqrt(1 - rho^2) at omega^1 = 1
  for (std::size_t l = 0; l < gap.size(); ++l) {
    double r = d.levels[l];
    EXPECT_NEAR(gap[l], 1.0 - std::sqrt(1.0 - r * r), 1e-9);
  }
}

TEST(Corner, IdenticalDataIsZero) {
  auto g = [](const Point& p) { return cplx(p.x[0] * p.xi[1]); };
  auto a = boundary_data(Face::psie, {0, 0}, 2, g);
  EXPECT_EQ(corner_compatibility_check(a, a), 0.0);
}

TEST(Corner, MismatchedDataIsRejected) {
  for (int n : {1, 2}) {
    auto de = boundary_data(Face::e, {0, 0}, n, [](const Point& p) { return cplx(p.x[0]); });
    auto dp = boundary_data(Face::psi, {0, 0}, n, [](const Point& p) { return cplx(p.xi[0]); });
    double expect = 0.0;
    for (auto& a : sphere_directions(n, kSphereSamples))
      for (auto& b : sphere_directions(n, kSphereSamples)) expect = std::max(expect, std::abs(a[0] - b[0]));
    EXPECT_NEAR(corner_compatibility_check(de, dp), expect, 1e-12);
    EXPECT_GT(corner_compatibility_check(de, dp), 1e-6);
  }
}

TEST(Corner, PrincipalTriplesAreCompatible) {
  auto x = Expr::x(0), xi = Expr::xi(1);
  std::vector<SymbolExpr> battery = {
      make_symbol(x * xi * inv(jap_x(2)) * inv(jap_xi(2)) + exp(-(x * x + Expr::x(1) * Expr::x(1))), 2, {0, 0}),
      make_symbol(jap_x(2) * jap_xi(2) + Expr::x(1) * Expr::xi(0), 2, {1, 1}),
      make_symbol((x + Expr(3.0)) * inv(jap_xi(2)), 2, {1, -1}),
  };
  for (auto& s : battery) {
    auto a = classical(s);
    EXPECT_LT(corner_compatibility_check(jmap(a, Face::e), jmap(a, Face::psi)), 1e-6);
    EXPECT_LT(corner_compatibility_check(jmap(a, Face::e), jmap(a, Face::psie)), 1e-6);
  }
}

// ---------------------------------------------------------------------------

TEST(Sct, ClosedFormFamiliesValidate) {
  for (int n : {1, 2})
    for (auto& m : families(n)) {
      auto r = validate_sct(sct_spec(m));
      EXPECT_TRUE(r.ok) << m.name << " n=" << n;
      EXPECT_LT(r.corner(), 1e-6);
    }
}

TEST(Sct, DilationSectionsByHand) {
  auto s = sct_spec(dilation_map(2, 2.0));
  for (auto& p : boundary_samples(Face::e, 2)) EXPECT_NEAR(Tape(s.f_e)(p).real(), 0.5, 1e-14);
  for (auto& p : boundary_samples(Face::psi, 2)) EXPECT_NEAR(Tape(s.f_psi)(p).real(), 2.0, 1e-14);
}

TEST(Sct, LinearCornerByHand) {
  auto L = test_L(2);
  auto s = sct_spec(linear_map(L));
  VectorTape A(s.A), B(s.B);
  for (auto& p : corner_samples(2)) {
    double la[2] = {2.0 * p.x[0], p.x[1]}, lb[2] = {0.5 * p.xi[0], p.xi[1]};
    double na = std::hypot(la[0], la[1]), nb = std::hypot(lb[0], lb[1]);
    auto a = A(p), b = B(p);
    EXPECT_NEAR(a[0], la[0] / na, 1e-14);
    EXPECT_NEAR(a[1], la[1] / na, 1e-14);
    EXPECT_NEAR(b[0], lb[0] / nb, 1e-14);
    EXPECT_NEAR(b[1], lb[1] / nb, 1e-14);
  }
}

TEST(Sct, IncoherentCornerIsRejected) {
  auto s = sct_spec(identity_map(2));
  s.A = {-Expr::x(0), -Expr::x(1)};
  auto r = validate_sct(s);
  EXPECT_FALSE(r.ok);
  EXPECT_NEAR(r.corner_T, 2.0, 1e-9);
}

TEST(Sct, NonUnitOrNegativeDataIsRejected) {
  auto s = sct_spec(identity_map(2));
  s.T = {Expr(2.0) * Expr::x(0), Expr(2.0) * Expr::x(1)};
  EXPECT_FALSE(validate_sct(s).ok);
  auto t = sct_spec(identity_map(2));
  t.f_psi = Expr(-1.0);
  EXPECT_FALSE(validate_sct(t).ok);
}

// ---------------------------------------------------------------------------

namespace {

OrderReductionData dilation_sections(int n, double c) {
  // p~ chosen so that p / p~ o chi reproduces the dilation radial factors
  return {norm_x(n), Expr(c) * norm_x(n), norm_xi(n), Expr(1.0 / c) * norm_xi(n)};
}

}  // namespace

TEST(Extension, IdentityWithEqualSections) {
  const int n = 2;
  OrderReductionData pr{norm_x(n) * jap_xi(n), norm_x(n) * jap_xi(n), jap_x(n) * norm_xi(n), jap_x(n) * norm_xi(n)};
  auto e = homogeneous_extension(sct_spec(identity_map(n)), pr);
  double y[2], eta[2];
  for (Face f : {Face::e, Face::psi, Face::psie})
    for (auto& p : shell_samples(n, 30, 0.5, 20.0)) {
      e.apply(f, p, y, eta);
      for (int i = 0; i < n; ++i) {
        EXPECT_NEAR(y[i], p.x[i], 1e-12 * std::max(1.0, std::abs(p.x[i])));
        EXPECT_NEAR(eta[i], p.xi[i], 1e-12 * std::max(1.0, std::abs(p.xi[i])));
      }
    }
}

TEST(Extension, DilationByHand) {
  for (int n : {1, 2}) {
    auto pr = dilation_sections(n, 2.0);
    auto e = homogeneous_extension(sct_spec(dilation_map(n, 2.0)), pr);
    EXPECT_LT(e.section_defect_e, 1e-14);
    EXPECT_LT(e.section_defect_psi, 1e-14);
    auto pts = shell_samples(n, 40, 0.5, 20.0);
    double y[2], eta[2];
    for (Face f : {Face::e, Face::psi, Face::psie})
      for (auto& p : pts) {
        e.apply(f, p, y, eta);
        for (int i = 0; i < n; ++i) {
          EXPECT_NEAR(y[i], p.x[i] / 2.0, 1e-12 * std::max(1.0, std::abs(p.x[i])));
          EXPECT_NEAR(eta[i], 2.0 * p.xi[i], 1e-12 * std::max(1.0, std::abs(p.xi[i])));
        }
      }
    for (Face f : {Face::e, Face::psi, Face::psie}) EXPECT_LT(extension_homogeneity_defect(e, f, pts), 1e-10);
    EXPECT_LT(order_reduction_defect(e, pr, Face::e, pts), 1e-8);
    EXPECT_LT(order_reduction_defect(e, pr, Face::psi, pts), 1e-8);
  }
}

TEST(Extension, DilationPreservesPoissonBrackets) {
  const int n = 2;
  auto e = homogeneous_extension(sct_spec(dilation_map(n, 2.0)), dilation_sections(n, 2.0));
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  std::vector<std::pair<Expr, Expr>> pairs = {
      {x[0], xi[0]}, {x[0] * xi[1], x[1] * xi[0]}, {dot(x, xi), norm_x(n) * jap_xi(n)}, {jap_xi(n), x[1] * x[1]}};
  auto pts = shell_samples(n, 50, 1.0, 20.0);
  for (auto& [a, b] : pairs) {
    EXPECT_LT(poisson_preservation_defect(e.Ce_y, e.Ce_eta, a, b, pts), 1e-6);
    EXPECT_LT(poisson_preservation_defect(e.Cpsi_y, e.Cpsi_eta, a, b, pts), 1e-6);
  }
}

TEST(Extension, NonCanonicalSectionsBreakPoisson) {
  // ratio <xi>/<2 xi> is not the symplectic factor 1/2
  const int n = 1;
  OrderReductionData pr{norm_x(n) * jap_xi(n), norm_x(n) * jap_xi(n), norm_xi(n), Expr(0.5) * norm_xi(n)};
  auto e = homogeneous_extension(sct_spec(dilation_map(n, 2.0)), pr);
  auto pts = shell_samples(n, 20, 1.0, 20.0);
  EXPECT_LT(extension_homogeneity_defect(e, Face::e, pts), 1e-10);
  EXPECT_GT(poisson_preservation_defect(e.Ce_y, e.Ce_eta, Expr::x(0), Expr::xi(0), pts), 1e-2);
}

TEST(Extension, ShearWithUnitSectionsIsTheShear) {
  const int n = 2;
  auto S = test_S(n);
  OrderReductionData pr{norm_x(n), norm_x(n), norm_xi(n), norm_xi(n)};
  auto e = homogeneous_extension(sct_spec(shear_map(S)), pr);
  double y[2], eta[2];
  for (auto& p : shell_samples(n, 30, 1.0, 20.0)) {
    e.apply(Face::e, p, y, eta);
    auto g = grad_h0(S, p.x.data(), n);
    for (int i = 0; i < n; ++i) {
      EXPECT_NEAR(y[i], p.x[i], 1e-12 * std::abs(p.x[i]) + 1e-14);
      EXPECT_NEAR(eta[i], p.xi[i] + g[i], 1e-12 * (std::abs(p.xi[i]) + 1.0));
    }
  }
  auto pts = shell_samples(n, 30, 1.0, 20.0);
  EXPECT_LT(poisson_preservation_defect(e.Ce_y, e.Ce_eta, Expr::x(0), Expr::xi(1), pts), 1e-6);
  EXPECT_LT(poisson_preservation_defect(e.Ce_y, e.Ce_eta, Expr::xi(0), Expr::xi(1), pts), 1e-6);
}

TEST(Extension, DegenerateSectionRaises) {
  const int n = 2;
  OrderReductionData pr{norm_x(n), -norm_x(n), norm_xi(n), norm_xi(n)};
  EXPECT_THROW(homogeneous_extension(sct_spec(identity_map(n)), pr), DegenerateSection);
  OrderReductionData pz{norm_x(n), norm_x(n) - Expr(1.0), norm_xi(n), norm_xi(n)};
  EXPECT_THROW(homogeneous_extension(sct_spec(identity_map(n)), pz), DegenerateSection);
}

// ---------------------------------------------------------------------------

TEST(Partition, OrderIsBySizeThenLexicographic) {
  auto p = partitions_in_order(2);
  ASSERT_EQ(p.size(), 4u);
  EXPECT_TRUE(p[0].empty());
  EXPECT_EQ(p[1], std::vector<int>{0});
  EXPECT_EQ(p[2], std::vector<int>{1});
  EXPECT_EQ(p[3], (std::vector<int>{0, 1}));
}

TEST(Partition, FamiliesUseEmptyPartition) {
  for (int n : {1, 2})
    for (auto& m : families(n)) EXPECT_TRUE(select_partition(m).empty()) << m.name;
}

TEST(Partition, SwapNeedsNonemptyPartition) {
  // (x, xi) -> (-xi, x): eta independent of xi, so I = {} fails the minor test
  CanonicalMap m{"swap", 1, {-Expr::xi(0)}, {Expr::x(0)}, {}, {}};
  EXPECT_EQ(select_partition(m), std::vector<int>{0});
  EXPECT_THROW(graph_data(m), UnsupportedPhase);
}

TEST(Generating, IdentityIsXDotEta) {
  auto g = generating_functions(graph_data(identity_map(2)));
  Expr ref = Expr::x(0) * Expr::xi(0) + Expr::x(1) * Expr::xi(1);
  for (auto& F : g.faces)
    for (auto& p : graph_samples(g)) EXPECT_EQ(Tape(F.S)(p), Tape(ref)(p));
  EXPECT_EQ(g.max_residual(), 0.0);
}

TEST(Generating, NineRelationsOnAllFamilies) {
  for (int n : {1, 2})
    for (auto& m : families(n)) {
      auto g = generating_functions(graph_data(m));
      for (auto& F : g.faces)
        for (double r : F.residual) EXPECT_LT(r, 1e-8) << m.name;
      EXPECT_LT(g.corner_identity, 1e-8);
    }
}

TEST(Generating, LinearGraphByHand) {
  auto L = test_L(2);
  auto g = generating_functions(graph_data(linear_map(L)));
  VectorTape Xi(g.faces[0].Xi), Y(g.faces[0].Y);
  for (auto& p : graph_samples(g)) {
    auto a = Xi(p), b = Y(p);
    // Xi = L^T eta, Y = L x
    EXPECT_NEAR(a[0], 2.0 * p.xi[0], 1e-12 * std::abs(p.xi[0]));
    EXPECT_NEAR(a[1], p.xi[1], 1e-12 * std::abs(p.xi[1]));
    EXPECT_NEAR(b[0], 2.0 * p.x[0], 1e-12 * std::abs(p.x[0]));
    EXPECT_NEAR(b[1], p.x[1], 1e-12 * std::abs(p.x[1]));
  }
}

TEST(Generating, ShearByHand) {
  for (int n : {1, 2}) {
    auto S = test_S(n);
    auto g = generating_functions(graph_data(shear_map(S)));
    Tape Se(g.faces[0].S), Sp(g.faces[1].S);
    for (auto& p : graph_samples(g)) {
      double xe = 0.0;
      for (int i = 0; i < n; ++i) xe += p.x[i] * p.xi[i];
      // S_e = x.eta - h0 (Euler), S_psi = x.eta
      EXPECT_NEAR(Se(p).real(), xe - h0(S, p.x.data(), n), 1e-11 * (1.0 + std::abs(xe)));
      EXPECT_NEAR(Sp(p).real(), xe, 1e-11 * (1.0 + std::abs(xe)));
    }
  }
}

TEST(Generating, NonCanonicalMapRaises) {
  // (x, xi) -> (x, 2 xi) scales the symplectic form
  auto x = Expr::vars(Block::x, 2), xi = Expr::vars(Block::xi, 2);
  CanonicalMap m{"stretch", 2, x, scale(xi, 2.0), scale(xi, 0.5), x};
  EXPECT_THROW(generating_functions(graph_data(m)), GradientMismatch);
}

// ---------------------------------------------------------------------------

TEST(Phase, IdentityIsStandardPhase) {
  auto ph = phase_from_sct(generating_functions(graph_data(identity_map(2))));
  EXPECT_EQ(ph.e.cls, PhaseClass::Q);
  EXPECT_EQ(ph.e.theta_dim, 2);
  EXPECT_EQ(ph.e.regular_split, (std::vector<int>{0, 1}));
  Tape t(ph.e.phase());
  for (auto& p : oracle::random_points(2, 50, 10.0)) {
    double ref = (p.x[0] - p.y[0]) * p.xi[0] + (p.x[1] - p.y[1]) * p.xi[1];
    EXPECT_NEAR(t(p).real(), ref, 1e-12 * (1.0 + std::abs(ref)));
  }
}

TEST(Phase, LinearStationarySetIsTheGraph) {
  auto L = test_L(2);
  auto ph = phase_from_sct(generating_functions(graph_data(linear_map(L))));
  std::function<cplx(const Point&)> phi = [t = std::make_shared<Tape>(ph.e.phase())](const Point& p) { return (*t)(p); };
  for (auto& q : oracle::random_points(2, 40, 10.0)) {
    // graph point: y = L x, eta = L^-T xi, stored in the theta slot
    Point p = q;
    p.y[0] = 2.0 * q.x[0];
    p.y[1] = q.x[1];
    p.xi[0] = 0.5 * q.xi[0];
    p.xi[1] = q.xi[1];
    for (int k = 0; k < 2; ++k) {
      EXPECT_NEAR(oracle::first_difference(phi, p, Block::xi, k, 1e-3).real(), 0.0, 1e-8);
      EXPECT_NEAR(oracle::first_difference(phi, p, Block::x, k, 1e-3).real(), q.xi[k], 1e-8);
    }
  }
}

TEST(Phase, CompatibilityOnAllFamilies) {
  for (int n : {1, 2})
    for (auto& m : families(n)) {
      auto ph = phase_from_sct(generating_functions(graph_data(m)));
      EXPECT_LT(ph.compatibility, 1e-8) << m.name;
      EXPECT_LT(ph.stationarity, 1e-8) << m.name;
    }
}

// ---------------------------------------------------------------------------

TEST(Hamiltonian, EulerIdentityRecoversC0) {
  for (int n : {1, 2}) {
    Expr c0 = inv(norm_x(n)) * inv(norm_xi(n));
    auto [g, r] = hamilton_field(c0, n);
    for (Face f : {Face::e, Face::psi}) {
      auto h = hamiltonian_from_field(g, r, 2, f);
      for (auto& p : shell_samples(n, 50, 0.5, 8.0, 99)) {
        double ref = 1.0 / (block_norm(p.x, n) * block_norm(p.xi, n));
        EXPECT_LT(std::abs(Tape(h.c.ast)(p).real() - ref) / ref, 1e-12);
      }
      EXPECT_LT(h.roundtrip, 1e-8);
    }
  }
}

TEST(Hamiltonian, ZeroFieldGivesZero) {
  auto h = hamiltonian_from_field({Expr(0.0), Expr(0.0)}, {Expr(0.0), Expr(0.0)}, 2, Face::psi);
  EXPECT_TRUE(h.c.ast.is_zero());
}

TEST(Hamiltonian, XDotXiRoundTrip) {
  const int n = 2;
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  Expr c0 = dot(x, xi) * inv(pow(norm_x(n), 2)) * inv(jap_xi(n));
  auto [g, r] = hamilton_field(c0, n);
  auto h = hamiltonian_from_field(g, r, 2, Face::e);
  for (auto& p : shell_samples(n, 50, 0.5, 8.0, 7)) {
    double d = p.x[0] * p.xi[0] + p.x[1] * p.xi[1];
    double ref = d / (std::pow(block_norm(p.x, n), 2) * oracle::jap(block_norm(p.xi, n)));
    EXPECT_NEAR(Tape(h.c.ast)(p).real(), ref, 1e-8 * (1.0 + std::abs(ref)));
  }
}

TEST(Hamiltonian, NonClosedFieldRaises) {
  const int n = 1;
  std::vector<Expr> g = {inv(norm_x(n)) * inv(pow(norm_xi(n), 2))}, r = {Expr(0.0)};
  EXPECT_THROW(hamiltonian_from_field(g, r, 2, Face::psi), NotClosed);
}

TEST(Hamiltonian, WrongDegreeRaises) {
  auto [g, r] = hamilton_field(inv(norm_x(1)) * inv(norm_xi(1)), 1);
  EXPECT_THROW(hamiltonian_from_field(g, r, 3, Face::psi), DegreeOrderViolation);
}
