#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "sgcalc/fio.hpp"

using namespace sgcalc;

namespace {

const GridSpec kS1 = GridSpec::standard(1);

double max_abs_diff(const GridFunction& a, const GridFunction& b) {
  double w = 0.0;
  for (std::size_t j = 0; j < a.v.size(); ++j) w = std::max(w, std::abs(a.v[j] - b.v[j]));
  return w;
}

GridFunction gaussian(const GridSpec& s, double c = 0.0) {
  return GridFunction::sample(s, [c, n = s.n](const double* p) {
    double r2 = (p[0] - c) * (p[0] - c) + (n == 2 ? p[1] * p[1] : 0.0);
    return cplx(std::exp(-r2 / 2));
  });
}

// f = x.theta, g = -(y + b).theta: a type II translation by b.
FIOHandle type_II_shift(const GridSpec& s, double b) {
  PhasePair p = PhasePair::standard(1);
  p.g.ast = -((Expr::y(0) + Expr(b)) * Expr::xi(0));
  return make_fio(p, Expr(1.0), s);
}

PhasePair excised_phase() {
  PhasePair p = PhasePair::standard(1);
  p.f.ast = p.f.ast + Expr::excision({Expr::x(0)}, 1, 2) * Expr::norm(std::vector<Expr>{Expr::x(0)});
  return p;
}

ClassicalSymbol sym(const Expr& e, BiOrder m, int n = 1) { return classical(make_symbol(e, n, m)); }

}  // namespace

// ---------------------------------------------------------------------------

TEST(QPhase, StandardPassesWithUnitRatios) {
  for (int n : {1, 2}) {
    auto r = validate_q_phase(PhasePair::standard(n));
    EXPECT_TRUE(r.ok) << n;
    for (auto name : {"grad_x_f~<theta>", "grad_theta_f~<x>", "grad_y_g~<theta>", "grad_theta_g~<y>"}) {
      EXPECT_LE(r[name].max, 1.0 + 1e-12) << name;
      EXPECT_GE(r[name].min, 1.0 / std::sqrt(2.0) - 1e-12) << name;
    }
    EXPECT_NEAR(r["det_x_theta_f>=1"].min, 1.0, 1e-12);
  }
}

TEST(QPhase, LinearDeterminantIsDetL) {
  auto r = validate_q_phase(linear_phase({{{2.0, 1.0}, {0.0, 1.0}}, {0.0, 0.0}, {0.0, 0.0}}));
  EXPECT_TRUE(r.ok);
  EXPECT_NEAR(r["det_x_theta_f>=1"].min, 2.0, 1e-12);
  EXPECT_NEAR(r["det_x_theta_f>=1"].max, 2.0, 1e-12);
  EXPECT_NEAR(r["det_y_theta_g>=1"].min, 1.0, 1e-12);
}

TEST(QPhase, ExcisedPerturbationStillQ) {
  auto r = validate_q_phase(excised_phase());
  EXPECT_TRUE(r.ok);
  // |grad_x f| = |theta + chi'|x| + chi sgn x|, bounded against <theta> on both sides
  EXPECT_GT(r["grad_x_f~<theta>"].max, 1.0);
}

TEST(QPhase, DegeneratePhaseFails) {
  PhasePair p = PhasePair::standard(1);
  p.f.ast = Expr::xi(0);  // no x dependence
  auto r = validate_q_phase(p);
  EXPECT_FALSE(r.ok);
  // <grad_x f>/<theta> = 1/<theta> decays, down to the outermost shell
  EXPECT_LT(r["grad_x_f~<theta>"].min, 1e-2);
  EXPECT_FALSE(r["det_x_theta_f>=1"].pass);
  EXPECT_TRUE(r["det_y_theta_g>=1"].pass);
}

TEST(QPhase, DetectsLinearFamily) {
  auto lp = detect_linear_phase(translation_fio(kS1, {1.5}).phase);
  ASSERT_TRUE(lp);
  EXPECT_NEAR(lp->L[0][0], 1.0, 1e-12);
  EXPECT_NEAR(lp->b[0], 1.5, 1e-12);
  EXPECT_FALSE(detect_linear_phase(excised_phase()));
}

// ---------------------------------------------------------------------------

TEST(Apply, StandardPhaseIsIdentity) {
  for (int n : {1, 2}) {
    auto s = GridSpec::standard(n);
    auto bat = test_battery(s);
    EXPECT_LT(battery_residual(fio_operator(standard_fio(s)), GridOperator::identity(s), bat), 1e-12) << n;
  }
}

TEST(Apply, TranslationIsCircularShift) {
  const int m = 7;
  auto T = translation_fio(kS1, {m * kS1.dx()});
  for (const auto& u : test_battery(kS1)) {
    auto v = apply_fio(T, u);
    GridFunction want(kS1);
    for (int j = 0; j < kS1.N; ++j) want.v[j] = u.v[(j - m + kS1.N) % kS1.N];
    EXPECT_LT(max_abs_diff(v, want), 1e-12);
  }
}

TEST(Apply, TranslationInTwoDimensions) {
  auto s = GridSpec::standard(2);
  const int m = 3;
  auto T = translation_fio(s, {0.0, m * s.dx()});
  auto u = gaussian(s, 1.0);
  auto v = apply_fio(T, u);
  GridFunction want(s);
  for (int a = 0; a < s.N; ++a)
    for (int b = 0; b < s.N; ++b) want.v[a * s.N + b] = u.v[a * s.N + (b - m + s.N) % s.N];
  EXPECT_LT(max_abs_diff(v, want), 1e-12);
}

// Property: with the standard phase the FIO is the quantization of its amplitude.
TEST(Apply, StandardPhaseMatchesQuantize) {
  auto x = Expr::x(0), xi = Expr::xi(0);
  std::vector<std::pair<Expr, std::array<int, 3>>> amps = {
      {jap_xi(1), {0, 0, 1}},
      {jap_x(1) * inv(jap_xi(1)), {1, 0, -1}},
      {x * xi * inv(jap_x(1)), {0, 0, 1}},
      {Expr(1.0) + Expr(0.5) * inv(jap_x(1)) * inv(jap_xi(1)), {0, 0, 0}},
  };
  auto bat = test_battery(kS1);
  for (auto& [a, o] : amps) {
    auto A = standard_fio(kS1, a, o);
    EXPECT_LT(battery_residual(fio_operator(A), quantize_expr(a, kS1), bat), 1e-10);
  }
}

TEST(Apply, DilationOfGaussian) {
  auto D = dilation_fio(kS1, 2.0);
  EXPECT_DOUBLE_EQ(D.band, 0.5);
  auto v = apply_fio(D, gaussian(kS1));
  // the grid is periodic, so 2x is read modulo the box
  auto want = GridFunction::sample(kS1, [](const double* p) {
    double y = std::remainder(2.0 * p[0], 2.0 * kS1.L);
    return cplx(std::exp(-y * y / 2));
  });
  EXPECT_LT(max_abs_diff(v, want), 1e-12);
}

TEST(Apply, DilationRejectsContraction) { EXPECT_THROW(dilation_fio(kS1, 0.5), DomainError); }

TEST(Apply, NyquistGuard) {
  auto D = dilation_fio(kS1, 2.0);
  auto full = make_fio(D.phase, Expr(1.0), kS1, 1.0);
  EXPECT_THROW(apply_fio(full, gaussian(kS1)), GridTooCoarse);
}

TEST(Apply, ModulationMultiplies) {
  const double k = 2.0;
  auto M = modulation_fio(kS1, {k});
  auto v = apply_fio(M, gaussian(kS1));
  auto want = GridFunction::sample(kS1, [k](const double* p) {
    return std::exp(-p[0] * p[0] / 2) * std::exp(cplx(0.0, k * p[0]));
  });
  EXPECT_LT(max_abs_diff(v, want), 1e-12);
  EXPECT_THROW(modulation_fio(kS1, {2.0 * kS1.xi_max()}), GridTooCoarse);
}

// ---------------------------------------------------------------------------

TEST(Adjoint, PairingIdentity) {
  auto bat = test_battery(kS1);
  std::vector<FIOHandle> ops = {standard_fio(kS1, jap_x(1) * inv(jap_xi(1)), {1, 0, -1}),
                                standard_fio(kS1, Expr::x(0) * Expr::xi(0), {1, 0, 1}),
                                translation_fio(kS1, {1.3}), dilation_fio(kS1, 2.0), modulation_fio(kS1, {1.5})};
  for (auto& A : ops) EXPECT_LT(adjoint_defect(A, bat), 1e-8);
}

TEST(Adjoint, Involution) {
  auto bat = test_battery(kS1);
  for (auto& A : {dilation_fio(kS1, 2.0), standard_fio(kS1, Expr::x(0) * Expr::xi(0), {1, 0, 1})}) {
    auto B = fio_adjoint(fio_adjoint(A));
    EXPECT_LT(battery_residual(fio_operator(B), fio_operator(A), bat), 1e-12);
  }
}

TEST(Adjoint, TranslationAdjointShiftsBack) {
  const int m = 5;
  auto Td = fio_adjoint(translation_fio(kS1, {m * kS1.dx()}));
  auto u = gaussian(kS1, 1.0);
  auto v = apply_fio(Td, u);
  GridFunction want(kS1);
  for (int j = 0; j < kS1.N; ++j) want.v[j] = u.v[(j + m) % kS1.N];
  EXPECT_LT(max_abs_diff(v, want), 1e-12);
}

TEST(Adjoint, RealMultiplierIsSelfAdjoint) {
  auto A = standard_fio(kS1, jap_xi(1), {0, 0, 1});
  EXPECT_LT(battery_residual(fio_operator(fio_adjoint(A)), fio_operator(A), test_battery(kS1)), 1e-10);
}

// Op(x xi)^* u = D(x u) = -i (1 - x^2) e^{-x^2/2} for the centred Gaussian.
TEST(Adjoint, PositionMomentumAgainstHandDerivative) {
  auto A = standard_fio(kS1, Expr::x(0) * Expr::xi(0), {1, 0, 1});
  auto v = apply_fio(fio_adjoint(A), gaussian(kS1));
  auto want = GridFunction::sample(kS1, [](const double* p) {
    return cplx(0.0, -(1.0 - p[0] * p[0]) * std::exp(-p[0] * p[0] / 2));
  });
  EXPECT_LT(max_abs_diff(v, want), 1e-10);
  // and with the formal adjoint symbol x xi - i
  auto q = formal_adjoint(sym(Expr::x(0) * Expr::xi(0), {1, 1}), 2);
  EXPECT_LT(battery_residual(fio_operator(fio_adjoint(A)), quantize(q, kS1), test_battery(kS1)), 1e-8);
}

// ---------------------------------------------------------------------------

TEST(Compose, IdentityPair) {
  auto rec = compose_type_I_II(standard_fio(kS1), standard_fio(kS1));
  EXPECT_LT(rec.cancellation, 1e-14);
  EXPECT_LT(rec.grid_residual, 1e-12);
  EXPECT_LT(battery_residual(fio_operator(rec.composed), GridOperator::identity(kS1), test_battery(kS1)), 1e-12);
}

TEST(Compose, TranslationsAdd) {
  const int a = 2, b = 5;
  auto rec = compose_type_I_II(translation_fio(kS1, {a * kS1.dx()}), type_II_shift(kS1, b * kS1.dx()));
  EXPECT_LT(rec.grid_residual, 1e-12);
  auto u = gaussian(kS1, -1.0);
  auto v = apply_fio(rec.composed, u);
  GridFunction want(kS1);
  for (int j = 0; j < kS1.N; ++j) want.v[j] = u.v[(j - a - b + kS1.N) % kS1.N];
  EXPECT_LT(max_abs_diff(v, want), 1e-12);
}

TEST(Compose, LinearWithAmplitude) {
  auto A = linear_fio(kS1, {{2.0}});
  A.amplitude = Amplitude{Expr(1.0) + Expr(0.5) * inv(jap_x(1)), 1, {0, 0, 0}, 1};
  auto B = standard_fio(kS1, inv(jap_x(1)) * jap_xi(1) * inv(jap_xi(1)), {-1, 0, 0});
  auto rec = compose_type_I_II(A, B);
  EXPECT_DOUBLE_EQ(rec.composed.band, 0.5);
  EXPECT_LT(rec.grid_residual, 1e-8);
}

TEST(Compose, BadCancellationRaises) {
  PhasePair p = PhasePair::standard(1);
  p.f.ast = Expr(2.0) * Expr::x(0) * Expr::xi(0);
  auto B = make_fio(p, Expr(1.0), kS1, 0.5);
  EXPECT_THROW(compose_type_I_II(standard_fio(kS1), B), PhaseMismatch);
}

TEST(Compose, SecondFactorMustBeTypeII) {
  PhasePair pa = PhasePair::standard(1), pb = PhasePair::standard(1);
  pa.g.ast = Expr(-2.0) * Expr::y(0) * Expr::xi(0);
  pb.f.ast = Expr(2.0) * Expr::x(0) * Expr::xi(0);
  EXPECT_THROW(compose_type_I_II(make_fio(pa, Expr(1.0), kS1, 0.5), make_fio(pb, Expr(1.0), kS1, 0.5)),
               PhaseMismatch);
}

// ---------------------------------------------------------------------------

TEST(Parametrix, IdentityIsExact) {
  auto r = fio_parametrix(standard_fio(kS1), 2);
  EXPECT_LT(r.residual_right, 1e-12);
  EXPECT_LT(r.residual_left, 1e-12);
}

TEST(Parametrix, TranslationShiftsBack) {
  const int m = 9;
  auto r = fio_parametrix(translation_fio(kS1, {m * kS1.dx()}), 0);
  EXPECT_LT(r.residual_right, 1e-12);
  auto u = gaussian(kS1, 2.0);
  auto v = apply_fio(r.handle, u);
  GridFunction want(kS1);
  for (int j = 0; j < kS1.N; ++j) want.v[j] = u.v[(j + m) % kS1.N];
  EXPECT_LT(max_abs_diff(v, want), 1e-12);
}

TEST(Parametrix, DilationInvertsOnBattery) {
  auto r = fio_parametrix(dilation_fio(kS1, 2.0), 2);
  EXPECT_LT(r.residual_left, 1e-10);
}

TEST(Parametrix, HigherTruncationShrinksResidual) {
  auto A = standard_fio(kS1, Expr(1.0) + Expr(0.5) * inv(jap_x(1)) * inv(jap_xi(1)));
  auto r0 = fio_parametrix(A, 0), r2 = fio_parametrix(A, 2);
  EXPECT_LE(r2.residual_right, r0.residual_right / 5.0);
  EXPECT_LE(r2.residual_left, r0.residual_left / 5.0);
}

TEST(Parametrix, Failures) {
  EXPECT_THROW(fio_parametrix_handle(standard_fio(kS1, Expr::x(0) * inv(jap_x(1))), 2), NotElliptic);
  EXPECT_THROW(fio_parametrix_handle(make_fio(excised_phase(), Expr(1.0), kS1), 2), UnsupportedPhase);
  EXPECT_THROW(fio_parametrix_handle(standard_fio(kS1, Expr(1.0) + Expr(0.1) * Expr::y(0) * inv(Expr::jap_of(Block::y, 1))), 2), UnsupportedPhase);
}

// ---------------------------------------------------------------------------

TEST(Egorov, TranslationAgainstShiftedSymbol) {
  const double a = 32 * kS1.dx();
  auto T = translation_fio(kS1, {a});
  auto C = linear_fio_map(*detect_linear_phase(T.phase));
  auto x = Expr::x(0), xi = Expr::xi(0);
  auto P = sym(jap_x(1) * jap_xi(1) + x * xi * inv(jap_x(1)), {1, 1});
  auto rep = egorov_check(T, P, C);
  EXPECT_TRUE(rep.ok);
  EXPECT_LT(rep.grid_residual, 1e-8);
  ASSERT_FALSE(rep.samples.empty());
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    double y = rep.samples[i].x[0] + a, e = rep.samples[i].xi[0];
    double want = oracle::jap(y) * oracle::jap(e) + y * e / oracle::jap(y);
    EXPECT_NEAR(rep.expected[i].real(), want, 1e-12 * std::max(1.0, std::abs(want)));
    EXPECT_LT(std::abs(rep.recovered[i] - want) / std::max(1.0, std::abs(want)), 1e-8);
  }
}

TEST(Egorov, DilationMultiplier) {
  auto D = dilation_fio(kS1, 2.0);
  auto C = linear_fio_map(*detect_linear_phase(D.phase));
  auto rep = egorov_check(D, sym(jap_xi(1), {0, 1}), C);
  EXPECT_TRUE(rep.ok);
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    double want = oracle::jap(2.0 * rep.samples[i].xi[0]);
    EXPECT_LT(std::abs(rep.recovered[i] - want) / want, 1e-8);
  }
}

// Mixed symbol under dilation: the error comes from the band projection and falls with N.
TEST(Egorov, DilationMixedSymbolConverges) {
  auto P = sym(jap_x(1) * jap_xi(1), {1, 1});
  double prev = 1.0;
  for (int N : {512, 1024}) {
    GridSpec s{1, 20.0, N};
    auto D = dilation_fio(s, 2.0);
    auto rep = egorov_check(D, P, linear_fio_map(*detect_linear_phase(D.phase)));
    EXPECT_TRUE(rep.ok) << N;
    EXPECT_LT(rep.grid_residual, prev);
    prev = rep.grid_residual;
  }
  EXPECT_LT(prev, 1e-4);
}

TEST(Egorov, ComponentsOfLinearMap) {
  auto A = linear_fio(GridSpec::standard(2), {{2.0, 0.0}, {0.0, 1.0}});
  auto C = linear_fio_map(*detect_linear_phase(A.phase));
  auto rep = egorov_check(A, sym(jap_xi(2), {0, 1}, 2), C);
  for (double c : rep.component_residual) EXPECT_LT(c, kComponentTolerance);
  EXPECT_TRUE(rep.ok) << rep.grid_residual;
}

TEST(Egorov, WrongMapRaises) {
  auto T = translation_fio(kS1, {1.0});
  EXPECT_THROW(egorov_check(T, sym(jap_xi(1), {0, 1}), dilation_map(1, 2.0)), PhaseMismatch);
}

// ---------------------------------------------------------------------------

TEST(Probe, TranslationPreservesOrders) {
  auto rep = order_preservation_probe(translation_fio(kS1, {16 * kS1.dx()}), opi_battery(1));
  EXPECT_TRUE(rep.order_preserving);
  EXPECT_TRUE(rep.identity_pattern);
  EXPECT_FALSE(rep.swap_pattern);
}

TEST(Probe, IdentityFIO) {
  auto rep = order_preservation_probe(standard_fio(kS1), opi_battery(1));
  EXPECT_TRUE(rep.identity_pattern);
  for (auto& r : rep.rows) EXPECT_TRUE(r.own) << r.name;
}

TEST(Probe, FourierSwapsOrders) {
  auto s = GridSpec::symmetric(1, 512);
  auto rep = order_preservation_probe(fourier_operator(s), inverse_fourier_operator(s), opi_battery(1));
  EXPECT_FALSE(rep.order_preserving);
  EXPECT_TRUE(rep.swap_pattern);
  for (auto& r : rep.rows) EXPECT_TRUE(r.swapped) << r.name;
}

TEST(Probe, NonLinearFamilyRejected) {
  EXPECT_THROW(order_preservation_probe(make_fio(excised_phase(), Expr(1.0), kS1), opi_battery(1)),
               UnsupportedPhase);
}
