#pragma once

// Scattering geometry: radial compactification, boundary functions, scattering canonical transformations (SCTs),
// their homogeneous extensions, generating functions, phases and Hamiltonians.

#include <array>
#include <cmath>
#include <complex>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sgcalc/phase.hpp"
#include "sgcalc/symbols.hpp"

namespace sgcalc {

// ---------------------------------------------------------------------------
// Radial compactification with rho = <x>^-1.

struct CompactPoint {
  double rho = 1.0;
  std::vector<double> omega;
  bool interior = true;
  bool origin = false;  // omega is the placeholder e_1
};

inline CompactPoint radial_compactify(const std::vector<double>& x) {
  if (x.empty()) throw DomainError("empty point");
  double r2 = 0.0;
  for (double v : x) r2 += v * v;
  const double r = std::sqrt(r2);
  CompactPoint c;
  c.rho = 1.0 / std::sqrt(1.0 + r2);
  c.omega.assign(x.size(), 0.0);
  if (r == 0.0) {
    c.omega[0] = 1.0;
    c.origin = true;
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) c.omega[i] = x[i] / r;
  }
  return c;
}

inline CompactPoint boundary_point(std::vector<double> omega) {
  double r = 0.0;
  for (double v : omega) r += v * v;
  r = std::sqrt(r);
  if (r == 0.0) throw DomainError("boundary direction must be nonzero");
  for (double& v : omega) v /= r;
  return CompactPoint{0.0, std::move(omega), false, false};
}

inline std::vector<double> radial_decompactify(const CompactPoint& c) {
  if (!(c.rho > 0.0)) throw BoundaryPoint("rho = 0 has no preimage in R^n");
  if (c.rho > 1.0) throw DomainError("rho must lie in (0, 1]");
  const double r = std::sqrt((1.0 - c.rho) * (1.0 + c.rho)) / c.rho;
  std::vector<double> x(c.omega.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = r * c.omega[i];
  return x;
}

// ---------------------------------------------------------------------------
// Shared sampling and vector helpers.

inline constexpr int kSphereSamples = 32;
inline constexpr std::uint64_t kSampleSeed = 0x5eed5ca7ULL;

inline double block_norm(const std::array<double, kMaxVars>& a, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * a[i];
  return std::sqrt(s);
}

inline std::array<double, kMaxVars>& block_of(Point& p, Block b) { return b == Block::x ? p.x : b == Block::xi ? p.xi : p.y; }

// Random vectors with log-uniform radius in [rmin, rmax]; deterministic for a given seed.
inline void random_vector(std::mt19937_64& rng, int n, double rmin, double rmax, double* out) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(std::log(rmin), std::log(rmax));
  double s = 0.0;
  do {
    s = 0.0;
    for (int i = 0; i < n; ++i) {
      out[i] = g(rng);
      s += out[i] * out[i];
    }
  } while (s < 1e-12);
  const double r = std::exp(u(rng)) / std::sqrt(s);
  for (int i = 0; i < n; ++i) out[i] *= r;
}

inline std::vector<Point> shell_samples(int n, int count, double rmin, double rmax, std::uint64_t seed = kSampleSeed,
                                        int xi_dim = -1) {
  if (xi_dim < 0) xi_dim = n;
  std::mt19937_64 rng(seed);
  std::vector<Point> pts(count);
  for (auto& p : pts) {
    random_vector(rng, n, rmin, rmax, p.x.data());
    random_vector(rng, xi_dim, rmin, rmax, p.xi.data());
  }
  return pts;
}

inline Expr dot(const std::vector<Expr>& a, const std::vector<Expr>& b) {
  std::vector<Expr> t;
  for (std::size_t i = 0; i < a.size(); ++i) t.push_back(a[i] * b[i]);
  return sum(t);
}

inline std::vector<Expr> scale(const std::vector<Expr>& v, const Expr& c) {
  std::vector<Expr> out;
  for (auto& e : v) out.push_back(c * e);
  return out;
}

inline std::vector<Expr> normalise(const std::vector<Expr>& v) { return scale(v, inv(Expr::norm(v))); }

inline std::vector<Expr> substitute_all(const std::vector<Expr>& v, const std::vector<Expr>& x,
                                        const std::vector<Expr>& xi) {
  std::vector<Expr> out;
  for (auto& e : v) out.push_back(substitute_blocks(e, x, xi));
  return out;
}

// Leading part of each component at the given bi-degree on a face.
inline std::vector<Expr> face_part(const std::vector<Expr>& v, int n, BiOrder degree, Face f) {
  std::vector<Expr> out;
  for (auto& e : v) {
    auto p = principal_part(make_symbol(e, n, degree), f, degree);
    if (!p) throw NonConvergent(std::string("leading terms cancel on face ") + face_name(f));
    out.push_back(p->ast);
  }
  return out;
}

// Vector-valued evaluation of a list of expressions (real parts).
class VectorTape {
 public:
  VectorTape() = default;
  explicit VectorTape(const std::vector<Expr>& v) : tape_(v), size_(v.size()) {}

  std::vector<double> operator()(const Point& p) const {
    std::vector<cplx> buf(size_);
    tape_.eval_all(p, buf.data());
    std::vector<double> out(size_);
    for (std::size_t i = 0; i < size_; ++i) {
      if (!std::isfinite(buf[i].real())) throw DomainError("non-finite map value");
      out[i] = buf[i].real();
    }
    return out;
  }
  std::size_t size() const { return size_; }

 private:
  Tape tape_;
  std::size_t size_ = 0;
};

inline double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Boundary functions: the weighted pullback rho_d^{m_e} rho_s^{m_psi} a on the compactified faces.

inline std::vector<Point> corner_samples(int n) {
  auto sph = sphere_directions(n, kSphereSamples);
  std::vector<Point> pts;
  for (auto& a : sph)
    for (auto& b : sph) {
      Point p;
      for (int i = 0; i < n; ++i) {
        p.x[i] = a[i];
        p.xi[i] = b[i];
      }
      pts.push_back(p);
    }
  return pts;
}

// e: x on the sphere, xi free; psi: x free, xi on the sphere; psie: both on the sphere.
inline std::vector<Point> boundary_samples(Face f, int n) {
  if (f == Face::psie) return corner_samples(n);
  auto sph = sphere_directions(n, kSphereSamples);
  auto dirs = sphere_directions(n, 8);
  const Block unit = f == Face::e ? Block::x : Block::xi;
  const Block free = f == Face::e ? Block::xi : Block::x;
  std::vector<Point> pts;
  for (auto& w : sph)
    for (double r : {0.0, 0.5, 1.0, 2.0, 5.0})
      for (auto& d : dirs) {
        Point p;
        for (int i = 0; i < n; ++i) {
          block_of(p, unit)[i] = w[i];
          block_of(p, free)[i] = r * d[i];
        }
        pts.push_back(p);
        if (r == 0.0) break;
      }
  return pts;
}

struct BoundaryFunctionData {
  Face face = Face::e;
  BiOrder order{};
  int dim = 1;
  std::vector<Point> samples;
  std::vector<cplx> values;
  std::vector<double> levels;           // boundary-defining values of the approach samples
  std::vector<std::vector<cplx>> near;  // near[l][s]: weighted pullback at rho = levels[l]
  std::vector<Point> corner;            // sphere x sphere samples
  std::vector<cplx> corner_values;      // restriction of the face data to the corner

  // sigma_face(a) at samples[i]: the face value times the weight of the free variable.
  cplx principal_value(std::size_t i) const {
    const Point& p = samples[i];
    if (face == Face::e) return values[i] * std::pow(jap_r(block_norm(p.xi, dim)), order.m_psi);
    if (face == Face::psi) return values[i] * std::pow(jap_r(block_norm(p.x, dim)), order.m_e);
    return values[i];
  }
};

namespace detail {

// Point at boundary-defining value rho on the ray through the unit vector stored in block b.
inline Point approach(Point p, Block b, int n, double rho) {
  const double r = std::sqrt((1.0 - rho) * (1.0 + rho)) / rho;
  for (int i = 0; i < n; ++i) block_of(p, b)[i] *= r;
  return p;
}

// Limit as rho -> 0 of f(rho), sampled at rho = 2^-k.
inline cplx rho_limit(const std::function<cplx(double)>& f) {
  return richardson_limit([&](double s) { return f(1.0 / s); });
}

}  // namespace detail

// Face values of the weighted pullback of a classical symbol, by limits in the boundary-defining functions.
inline BoundaryFunctionData jmap(const ClassicalSymbol& a, Face face) {
  const int n = a.dim();
  const BiOrder m = a.order();
  auto tape = std::make_shared<Tape>(a.base.ast);
  BoundaryFunctionData d;
  d.face = face;
  d.order = m;
  d.dim = n;
  d.samples = boundary_samples(face, n);
  d.corner = corner_samples(n);

  // weighted pullback at (rho_d, rho_s); 0 marks the face itself
  auto weighted = [tape, n, m, face](const Point& p, double rho) -> cplx {
    Point q = p;
    double w = 1.0;
    if (face != Face::psi) {
      q = detail::approach(q, Block::x, n, rho);
      w *= std::pow(rho, m.m_e);
    } else {
      w *= std::pow(jap_r(block_norm(p.x, n)), -m.m_e);
    }
    if (face != Face::e) {
      q = detail::approach(q, Block::xi, n, rho);
      w *= std::pow(rho, m.m_psi);
    } else {
      w *= std::pow(jap_r(block_norm(p.xi, n)), -m.m_psi);
    }
    cplx v = (*tape)(q);
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw NonConvergent("non-finite symbol value");
    return w * v;
  };
  auto face_value = [weighted](const Point& p) { return detail::rho_limit([&](double r) { return weighted(p, r); }); };

  d.values.resize(d.samples.size());
  parallel_for(d.samples.size(), [&](std::size_t i) { d.values[i] = face_value(d.samples[i]); });
  d.levels = {0.5, 1.0 / 8, 1.0 / 32};
  for (double r : d.levels) {
    std::vector<cplx> row(d.samples.size());
    for (std::size_t i = 0; i < row.size(); ++i) row[i] = weighted(d.samples[i], r);
    d.near.push_back(std::move(row));
  }

  // corner restriction: a second limit in the free variable of the face data
  d.corner_values.resize(d.corner.size());
  parallel_for(d.corner.size(), [&](std::size_t i) {
    const Point& c = d.corner[i];
    if (face == Face::psie) {
      d.corner_values[i] = face_value(c);
    } else {
      const Block free = face == Face::e ? Block::xi : Block::x;
      d.corner_values[i] = detail::rho_limit([&](double r) { return face_value(detail::approach(c, free, n, r)); });
    }
  });
  return d;
}

inline std::array<BoundaryFunctionData, 3> jmap(const ClassicalSymbol& a) {
  return {jmap(a, Face::e), jmap(a, Face::psi), jmap(a, Face::psie)};
}

// Face data from a closed function on the face (x or xi on the sphere as in boundary_samples).
inline BoundaryFunctionData boundary_data(Face face, BiOrder order, int n, const std::function<cplx(const Point&)>& g) {
  BoundaryFunctionData d;
  d.face = face;
  d.order = order;
  d.dim = n;
  d.samples = boundary_samples(face, n);
  for (auto& p : d.samples) d.values.push_back(g(p));
  d.corner = corner_samples(n);
  for (auto& c : d.corner) {
    if (face == Face::psie) {
      d.corner_values.push_back(g(c));
    } else {
      const Block free = face == Face::e ? Block::xi : Block::x;
      d.corner_values.push_back(detail::rho_limit([&](double r) { return g(detail::approach(c, free, n, r)); }));
    }
  }
  return d;
}

inline double corner_compatibility_check(const BoundaryFunctionData& a, const BoundaryFunctionData& b) {
  if (a.dim != b.dim || a.corner.size() != b.corner.size()) throw DomainError("corner samples differ");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.corner.size(); ++i) {
    for (int k = 0; k < a.dim; ++k)
      if (a.corner[i].x[k] != b.corner[i].x[k] || a.corner[i].xi[k] != b.corner[i].xi[k])
        throw DomainError("corner samples differ");
    worst = std::max(worst, std::abs(a.corner_values[i] - b.corner_values[i]));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Closed-form canonical maps C(x, xi) = (y, eta) and their graph functions Xi(x, eta), Y(x, eta).

struct CanonicalMap {
  std::string name;
  int n = 1;
  std::vector<Expr> y, eta;  // in (x, xi)
  std::vector<Expr> Xi, Y;   // in (x, eta) with eta in the xi block
};

using Matrix = std::vector<std::vector<double>>;

inline double determinant(Matrix a) {
  const std::size_t n = a.size();
  double det = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (a[piv][c] == 0.0) return 0.0;
    if (piv != c) {
      std::swap(a[piv], a[c]);
      det = -det;
    }
    det *= a[c][c];
    for (std::size_t r = c + 1; r < n; ++r) {
      double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
    }
  }
  return det;
}

inline Matrix inverse(const Matrix& m) {
  const std::size_t n = m.size();
  Matrix a = m, inv_m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv_m[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    if (std::abs(a[piv][c]) < 1e-12) throw DomainError("singular matrix");
    std::swap(a[piv], a[c]);
    std::swap(inv_m[piv], inv_m[c]);
    const double d = a[c][c];
    for (std::size_t k = 0; k < n; ++k) {
      a[c][k] /= d;
      inv_m[c][k] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c) continue;
      const double f = a[r][c];
      for (std::size_t k = 0; k < n; ++k) {
        a[r][k] -= f * a[c][k];
        inv_m[r][k] -= f * inv_m[c][k];
      }
    }
  }
  return inv_m;
}

inline std::vector<Expr> mat_vec(const Matrix& m, const std::vector<Expr>& v) {
  std::vector<Expr> out;
  for (auto& row : m) {
    std::vector<Expr> t;
    for (std::size_t j = 0; j < v.size(); ++j)
      if (row[j] != 0.0) t.push_back(Expr(row[j]) * v[j]);
    out.push_back(sum(t));
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m[0].size(), std::vector<double>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[0].size(); ++j) t[j][i] = m[i][j];
  return t;
}

inline CanonicalMap identity_map(int n) {
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  return {"identity", n, x, xi, xi, x};
}

// (x, xi) -> (x/c, c xi)
inline CanonicalMap dilation_map(int n, double c) {
  if (!(c > 0)) throw DomainError("dilation factor must be positive");
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  return {"dilation", n, scale(x, 1.0 / c), scale(xi, c), scale(xi, 1.0 / c), scale(x, 1.0 / c)};
}

// (x, xi) -> (L x, L^-T xi)
inline CanonicalMap linear_map(const Matrix& L) {
  const int n = static_cast<int>(L.size());
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  Matrix LinvT = transpose(inverse(L));
  return {"linear", n, mat_vec(L, x), mat_vec(LinvT, xi), mat_vec(transpose(L), xi), mat_vec(L, x)};
}

// (x, xi) -> (x, xi + grad h) with h = x.Sx / <x>, S symmetric.
inline CanonicalMap shear_map(const Matrix& S) {
  const int n = static_cast<int>(S.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (S[i][j] != S[j][i]) throw DomainError("shear matrix must be symmetric");
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  Expr h = dot(x, mat_vec(S, x)) * inv(jap_x(n));
  std::vector<Expr> eta, Xi;
  for (int i = 0; i < n; ++i) {
    Expr g = diff(h, Block::x, i);
    eta.push_back(xi[i] + g);
    Xi.push_back(xi[i] - g);
  }
  return {"shear", n, x, eta, Xi, x};
}

// a o b; both maps must send x to y independently of xi.
inline CanonicalMap compose_maps(const CanonicalMap& a, const CanonicalMap& b) {
  if (a.n != b.n) throw DomainError("dimension mismatch");
  for (auto* m : {&a, &b})
    for (auto& e : m->y)
      if (uses(e) & 2u) throw DomainError("composition needs base maps with y independent of xi");
  CanonicalMap c;
  c.name = a.name + "*" + b.name;
  c.n = a.n;
  c.y = substitute_all(a.y, b.y, b.eta);
  c.eta = substitute_all(a.eta, b.y, b.eta);
  auto eta = Expr::vars(Block::xi, a.n);
  auto y2 = b.y;  // x only
  auto eta2 = substitute_all(a.Xi, y2, eta);
  c.Xi = substitute_all(b.Xi, Expr::vars(Block::x, a.n), eta2);
  c.Y = substitute_all(a.Y, y2, eta);
  return c;
}

// ---------------------------------------------------------------------------
// SCT data on the three faces.

struct SCTSpec {
  int n = 1;
  std::vector<Expr> T, H;  // chi_e(alpha, xi), alpha in the x block
  std::vector<Expr> Y, G;  // chi_psi(x, beta), beta in the xi block
  std::vector<Expr> A, B;  // chi_psie(alpha, beta)
  Expr f_e, f_psi;         // sections: radial factors on the e and psi faces
};

// Face maps of a closed-form map from its leading parts.
inline SCTSpec sct_spec(const CanonicalMap& m) {
  const int n = m.n;
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  auto xhat = scale(x, inv(norm_x(n))), xihat = scale(xi, inv(norm_xi(n)));
  SCTSpec s;
  s.n = n;
  auto ye = face_part(m.y, n, {1, 0}, Face::e);
  s.T = substitute_all(normalise(ye), xhat, {});
  s.H = substitute_all(face_part(m.eta, n, {0, 1}, Face::e), xhat, {});
  s.f_e = substitute_blocks(Expr::norm(ye), xhat, {});
  s.Y = substitute_all(face_part(m.y, n, {1, 0}, Face::psi), {}, xihat);
  auto etap = face_part(m.eta, n, {0, 1}, Face::psi);
  s.G = substitute_all(normalise(etap), {}, xihat);
  s.f_psi = substitute_blocks(Expr::norm(etap), {}, xihat);
  s.A = substitute_all(normalise(face_part(m.y, n, {1, 0}, Face::psie)), xhat, xihat);
  s.B = substitute_all(normalise(face_part(m.eta, n, {0, 1}, Face::psie)), xhat, xihat);
  return s;
}

struct SCTReport {
  double min_section = 0.0;
  double unit_defect = 0.0;
  double corner_T = 0.0, corner_Y = 0.0, corner_G = 0.0, corner_H = 0.0;
  bool ok = false;

  double corner() const { return std::max({corner_T, corner_Y, corner_G, corner_H}); }
};

inline constexpr double kCornerTolerance = 1e-6;
inline constexpr double kSectionThreshold = 1e-8;

inline SCTReport validate_sct(const SCTSpec& s) {
  const int n = s.n;
  for (auto* v : {&s.T, &s.H, &s.Y, &s.G, &s.A, &s.B})
    if (static_cast<int>(v->size()) != n) throw SchemaError("SCT component count must equal n");
  SCTReport r;
  VectorTape T(s.T), H(s.H), Y(s.Y), G(s.G), A(s.A), B(s.B);
  Tape fe(s.f_e), fp(s.f_psi);
  r.min_section = std::numeric_limits<double>::infinity();
  for (auto& p : boundary_samples(Face::e, n)) {
    cplx v = fe(p);
    r.min_section = std::min(r.min_section, std::abs(v.imag()) > 1e-12 ? -1.0 : v.real());
    r.unit_defect = std::max(r.unit_defect, std::abs(vec_norm(T(p)) - 1.0));
  }
  for (auto& p : boundary_samples(Face::psi, n)) {
    cplx v = fp(p);
    r.min_section = std::min(r.min_section, std::abs(v.imag()) > 1e-12 ? -1.0 : v.real());
    r.unit_defect = std::max(r.unit_defect, std::abs(vec_norm(G(p)) - 1.0));
  }
  auto corner = corner_samples(n);
  std::vector<std::array<double, 4>> res(corner.size());
  parallel_for(corner.size(), [&](std::size_t c) {
    const Point& p = corner[c];
    auto a = A(p), b = B(p);
    auto limit = [&](const VectorTape& t, Face f, int deg) {
      std::vector<double> out(n);
      for (int i = 0; i < n; ++i)
        out[i] = richardson_limit([&](double mu) { return cplx(t(scale_point(p, f, mu))[i] * std::pow(mu, -deg)); })
                     .real();
      return out;
    };
    auto dist = [](std::vector<double> u, const std::vector<double>& v, bool norm) {
      if (norm) {
        double l = vec_norm(u);
        if (l == 0.0) return std::numeric_limits<double>::infinity();
        for (double& t : u) t /= l;
      }
      double d = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) d = std::max(d, std::abs(u[i] - v[i]));
      return d;
    };
    res[c] = {dist(limit(T, Face::psi, 0), a, false), dist(limit(Y, Face::e, 1), a, true),
              dist(limit(G, Face::e, 0), b, false), dist(limit(H, Face::psi, 1), b, true)};
  });
  for (auto& v : res) {
    r.corner_T = std::max(r.corner_T, v[0]);
    r.corner_Y = std::max(r.corner_Y, v[1]);
    r.corner_G = std::max(r.corner_G, v[2]);
    r.corner_H = std::max(r.corner_H, v[3]);
  }
  r.ok = r.min_section > kSectionThreshold && r.unit_defect < 1e-10 && r.corner() < kCornerTolerance;
  return r;
}

// ---------------------------------------------------------------------------
// Homogeneous extension of the face maps via order-reduction sections.

struct OrderReductionData {
  Expr p_e, p_e_tilde;      // e-homogeneous of degree 1 in x; the tilde symbol is read in the target variables
  Expr p_psi, p_psi_tilde;  // psi-homogeneous of degree 1 in xi
};

struct ExtendedSCT {
  int n = 1;
  std::vector<Expr> Ce_y, Ce_eta;      // 1-homogeneous in x
  std::vector<Expr> Cpsi_y, Cpsi_eta;  // 1-homogeneous in xi
  Expr section_e, section_psi;         // p_e / p~_e o chi_e and the psi analogue
  std::function<void(const Point&, double*, double*)> Cpsie;
  double section_defect_e = 0.0, section_defect_psi = 0.0;  // against the spec sections

  void apply(Face f, const Point& p, double* y, double* eta) const {
    if (f == Face::psie) return Cpsie(p, y, eta);
    auto ty = VectorTape(f == Face::e ? Ce_y : Cpsi_y)(p);
    auto te = VectorTape(f == Face::e ? Ce_eta : Cpsi_eta)(p);
    for (int i = 0; i < n; ++i) {
      y[i] = ty[i];
      eta[i] = te[i];
    }
  }
};

inline ExtendedSCT homogeneous_extension(const SCTSpec& s, const OrderReductionData& pr) {
  auto rep = validate_sct(s);
  if (!rep.ok) throw DomainError("SCT spec fails validation");
  const int n = s.n;
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  auto xhat = scale(x, inv(norm_x(n))), xihat = scale(xi, inv(norm_xi(n)));
  ExtendedSCT e;
  e.n = n;

  auto Th = substitute_all(s.T, xhat, {}), Hh = substitute_all(s.H, xhat, {});
  Expr pt_e = substitute_blocks(pr.p_e_tilde, Th, Hh);
  auto Yh = substitute_all(s.Y, {}, xihat), Gh = substitute_all(s.G, {}, xihat);
  Expr pt_psi = substitute_blocks(pr.p_psi_tilde, Yh, Gh);

  auto check = [&](const Expr& den, Face f) {
    Tape t(den);
    for (auto& p : boundary_samples(f, n)) {
      cplx v = t(p);
      if (!(v.real() > kSectionThreshold) || std::abs(v.imag()) > 1e-12)
        throw DegenerateSection(std::string("order-reduction symbol not positive on face ") + face_name(f));
    }
  };
  check(pt_e, Face::e);
  check(pt_psi, Face::psi);

  e.section_e = substitute_blocks(pr.p_e, xhat, {}) * inv(pt_e);
  e.section_psi = substitute_blocks(pr.p_psi, {}, xihat) * inv(pt_psi);
  e.Ce_y = scale(Th, e.section_e * norm_x(n));
  e.Ce_eta = Hh;
  e.Cpsi_y = Yh;
  e.Cpsi_eta = scale(Gh, e.section_psi * norm_xi(n));

  auto defect = [&](const Expr& a, const Expr& b, Face f) {
    Tape ta(a), tb(b);
    double d = 0.0;
    for (auto& p : boundary_samples(f, n)) d = std::max(d, std::abs(ta(p) - tb(p)));
    return d;
  };
  e.section_defect_e = defect(e.section_e, s.f_e, Face::e);
  e.section_defect_psi = defect(e.section_psi, s.f_psi, Face::psi);

  // corner: bi-homogeneous with the corner limits of both sections
  auto se = std::make_shared<Tape>(e.section_e), sp = std::make_shared<Tape>(e.section_psi);
  auto A = std::make_shared<VectorTape>(s.A), B = std::make_shared<VectorTape>(s.B);
  e.Cpsie = [n, se, sp, A, B](const Point& p, double* y, double* eta) {
    const double rx = block_norm(p.x, n), rxi = block_norm(p.xi, n);
    if (rx == 0.0 || rxi == 0.0) throw DomainError("corner map needs x and xi nonzero");
    Point u;
    for (int i = 0; i < n; ++i) {
      u.x[i] = p.x[i] / rx;
      u.xi[i] = p.xi[i] / rxi;
    }
    double ce = richardson_limit([&](double mu) { return (*se)(scale_point(u, Face::psi, mu)); }).real();
    double cp = richardson_limit([&](double mu) { return (*sp)(scale_point(u, Face::e, mu)); }).real();
    auto a = (*A)(u), b = (*B)(u);
    for (int i = 0; i < n; ++i) {
      y[i] = rx * ce * a[i];
      eta[i] = rxi * cp * b[i];
    }
  };
  return e;
}

// C(mu-scaled p) against mu times C(p) in the scaled block; the other block must not move.
inline double extension_homogeneity_defect(const ExtendedSCT& e, Face f, const std::vector<Point>& pts) {
  const int n = e.n;
  double worst = 0.0;
  std::vector<double> y0(n), e0(n), y1(n), e1(n);
  for (auto& p : pts) {
    e.apply(f, p, y0.data(), e0.data());
    const double sy = vec_norm(y0), se = vec_norm(e0);
    for (double mu : {2.0, 4.0, 8.0}) {
      e.apply(f, scale_point(p, f, mu), y1.data(), e1.data());
      const double ky = f == Face::psi ? 1.0 : mu, ke = f == Face::e ? 1.0 : mu;
      for (int i = 0; i < n; ++i) {
        worst = std::max(worst, std::abs(y1[i] - ky * y0[i]) / std::max(1.0, ky * sy));
        worst = std::max(worst, std::abs(e1[i] - ke * e0[i]) / std::max(1.0, ke * se));
      }
    }
  }
  return worst;
}

// p~(C(x, xi)) against p(x, xi) on the face.
inline double order_reduction_defect(const ExtendedSCT& e, const OrderReductionData& pr, Face f,
                                     const std::vector<Point>& pts) {
  if (f == Face::psie) throw DomainError("order-reduction check is per face");
  Tape p(f == Face::e ? pr.p_e : pr.p_psi), pt(f == Face::e ? pr.p_e_tilde : pr.p_psi_tilde);
  double worst = 0.0;
  std::vector<double> y(e.n), eta(e.n);
  for (auto& q : pts) {
    e.apply(f, q, y.data(), eta.data());
    Point t;
    for (int i = 0; i < e.n; ++i) {
      t.x[i] = y[i];
      t.xi[i] = eta[i];
    }
    cplx a = p(q), b = pt(t);
    worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

// {a o C, b o C} - {a, b} o C on samples, for C given by expressions.
inline double poisson_preservation_defect(const std::vector<Expr>& Cy, const std::vector<Expr>& Ceta, const Expr& a,
                                          const Expr& b, const std::vector<Point>& pts) {
  const int n = static_cast<int>(Cy.size());
  auto ac = make_symbol(substitute_blocks(a, Cy, Ceta), n, {});
  auto bc = make_symbol(substitute_blocks(b, Cy, Ceta), n, {});
  Expr lhs = poisson_bracket(ac, bc).ast;
  Expr rhs = substitute_blocks(poisson_bracket(make_symbol(a, n, {}), make_symbol(b, n, {})).ast, Cy, Ceta);
  Tape tl(lhs), tr(rhs);
  double worst = 0.0;
  for (auto& p : pts) {
    cplx u = tl(p), v = tr(p);
    worst = std::max(worst, std::abs(u - v) / std::max(1.0, std::abs(v)));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Generating functions.

inline constexpr double kGradientTolerance = 1e-8;
inline constexpr double kMinorThreshold = 0.1;

struct GraphData {
  int n = 1;
  std::vector<int> I;     // xi_i (i in I) are graph variables; x^J the others
  std::vector<Expr> X;    // X^i, i in I
  std::vector<Expr> Xi;   // Xi_j, j in J
  std::vector<Expr> Y;    // Y^k, k = 1..n
  // graph variables: x block holds x (x^J used), xi block holds theta = (xi_I, eta)
};

inline std::vector<int> complement(const std::vector<int>& I, int n) {
  std::vector<int> J;
  for (int j = 0; j < n; ++j)
    if (std::find(I.begin(), I.end(), j) == I.end()) J.push_back(j);
  return J;
}

// Subsets of {0..n-1} by size, then lexicographically.
inline std::vector<std::vector<int>> partitions_in_order(int n) {
  std::vector<std::vector<int>> out;
  for (int k = 0; k <= n; ++k) {
    std::vector<int> idx(k);
    for (int i = 0; i < k; ++i) idx[i] = i;
    while (true) {
      out.push_back(idx);
      int i = k - 1;
      while (i >= 0 && idx[i] == n - k + i) --i;
      if (i < 0) break;
      ++idx[i];
      for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
    }
  }
  return out;
}

// First partition whose minor det d(eta)/d(x^I, xi_J) stays above the threshold on the samples.
inline std::vector<int> select_partition(const CanonicalMap& m, double threshold = kMinorThreshold) {
  const int n = m.n;
  auto pts = shell_samples(n, 64, 0.5, 20.0);
  for (auto& I : partitions_in_order(n)) {
    auto J = complement(I, n);
    std::vector<Expr> entries;
    for (int k = 0; k < n; ++k) {
      for (int i : I) entries.push_back(diff(m.eta[k], Block::x, i));
      for (int j : J) entries.push_back(diff(m.eta[k], Block::xi, j));
    }
    VectorTape t(entries);
    bool ok = true;
    for (auto& p : pts) {
      auto v = t(p);
      Matrix M(n, std::vector<double>(n));
      for (int k = 0; k < n; ++k)
        for (int c = 0; c < n; ++c) M[k][c] = v[k * n + c];
      if (std::abs(determinant(M)) < threshold) {
        ok = false;
        break;
      }
    }
    if (ok) return I;
  }
  throw UnsupportedPhase("no partition with a nondegenerate minor");
}

inline GraphData graph_data(const CanonicalMap& m) {
  auto I = select_partition(m);
  if (!I.empty()) throw UnsupportedPhase("closed-form graph functions are available only for the partition I = {}");
  return GraphData{m.n, I, {}, m.Xi, m.Y};
}

struct FaceGenerator {
  Face face = Face::e;
  std::vector<Expr> X, Xi, Y;  // face components
  Expr S;
  std::array<double, 3> residual{};  // dS/dx^J - Xi, dS/dxi_I + X, dS/deta - Y
};

struct GeneratingData {
  int n = 1;
  std::vector<int> I, J;
  std::array<FaceGenerator, 3> faces;  // e, psi, psie
  double corner_identity = 0.0;        // x^J.Xi - (-X.xi_I + Y.eta) at the corner

  int theta_dim() const { return static_cast<int>(I.size()) + n; }
  double max_residual() const {
    double r = 0.0;
    for (auto& f : faces)
      for (double v : f.residual) r = std::max(r, v);
    return r;
  }
};

inline std::vector<Point> graph_samples(const GeneratingData& g, int count = 100) {
  return shell_samples(g.n, count, 1.0, 10.0, kSampleSeed + 1, g.theta_dim());
}

inline GeneratingData generating_functions(const GraphData& gd) {
  const int n = gd.n;
  GeneratingData g;
  g.n = n;
  g.I = gd.I;
  g.J = complement(gd.I, n);
  const int nI = static_cast<int>(g.I.size());
  if (gd.X.size() != g.I.size() || gd.Xi.size() != g.J.size() || static_cast<int>(gd.Y.size()) != n)
    throw SchemaError("graph data sizes do not match the partition");
  auto x = Expr::vars(Block::x, n), th = Expr::vars(Block::xi, nI + n);
  auto xiI = [&](int a) { return th[a]; };
  auto eta = [&](int k) { return th[nI + k]; };

  const std::array<Face, 3> fs = {Face::e, Face::psi, Face::psie};
  for (int f = 0; f < 3; ++f) {
    FaceGenerator& F = g.faces[f];
    F.face = fs[f];
    F.X = face_part(gd.X, n, {1, 0}, F.face);
    F.Xi = face_part(gd.Xi, n, {0, 1}, F.face);
    F.Y = face_part(gd.Y, n, {1, 0}, F.face);
    std::vector<Expr> t;
    if (F.face == Face::psi) {
      for (int a = 0; a < nI; ++a) t.push_back(-(F.X[a] * xiI(a)));
      for (int k = 0; k < n; ++k) t.push_back(F.Y[k] * eta(k));
    } else {
      for (std::size_t b = 0; b < g.J.size(); ++b) t.push_back(x[g.J[b]] * F.Xi[b]);
    }
    F.S = sum(t);

    std::vector<Expr> lhs, rhs;
    std::vector<int> kind;
    for (std::size_t b = 0; b < g.J.size(); ++b) {
      lhs.push_back(diff(F.S, Block::x, g.J[b]));
      rhs.push_back(F.Xi[b]);
      kind.push_back(0);
    }
    for (int a = 0; a < nI; ++a) {
      lhs.push_back(diff(F.S, Block::xi, a));
      rhs.push_back(-F.X[a]);
      kind.push_back(1);
    }
    for (int k = 0; k < n; ++k) {
      lhs.push_back(diff(F.S, Block::xi, nI + k));
      rhs.push_back(F.Y[k]);
      kind.push_back(2);
    }
    VectorTape tl(lhs), tr(rhs);
    for (auto& p : graph_samples(g)) {
      auto u = tl(p), v = tr(p);
      for (std::size_t r = 0; r < u.size(); ++r)
        F.residual[kind[r]] = std::max(F.residual[kind[r]], std::abs(u[r] - v[r]) / std::max(1.0, std::abs(v[r])));
    }
  }
  {
    const FaceGenerator& C = g.faces[2];
    std::vector<Expr> t;
    for (int a = 0; a < nI; ++a) t.push_back(-(C.X[a] * xiI(a)));
    for (int k = 0; k < n; ++k) t.push_back(C.Y[k] * eta(k));
    Tape a(C.S), b(sum(t));
    for (auto& p : graph_samples(g))
      g.corner_identity = std::max(g.corner_identity, std::abs(a(p) - b(p)) / std::max(1.0, std::abs(b(p))));
  }
  if (g.max_residual() > kGradientTolerance || g.corner_identity > kGradientTolerance)
    throw GradientMismatch("generating-function relations fail: residual " + std::to_string(g.max_residual()));
  return g;
}

// ---------------------------------------------------------------------------
// Phases from generating functions.

struct PhaseConstruction {
  PhasePair e, psi;
  std::vector<int> I;
  double stationarity = 0.0;   // d_theta phi on graph samples, and d_x phi against xi
  double compatibility = 0.0;  // sigma_psi(phi_e) - sigma_e(phi_psi) on corner graph samples
};

inline PhaseConstruction phase_from_sct(const GeneratingData& g) {
  if (g.max_residual() > kGradientTolerance) throw GradientMismatch("generating data failed its gradient checks");
  const int n = g.n, nI = static_cast<int>(g.I.size()), td = g.theta_dim();
  auto x = Expr::vars(Block::x, n), y = Expr::vars(Block::y, n), th = Expr::vars(Block::xi, td);
  std::vector<Expr> gy;
  for (int k = 0; k < n; ++k) gy.push_back(-(y[k] * th[nI + k]));
  Expr G = sum(gy);

  auto make = [&](const FaceGenerator& F) {
    std::vector<Expr> t{F.S};
    for (int a = 0; a < nI; ++a) t.push_back(x[g.I[a]] * th[a]);
    PhasePair p;
    p.f = SymbolExpr{sum(t), n, BiOrder::diag(1), td};
    p.g = SymbolExpr{G, n, BiOrder::diag(1), td};
    p.theta_dim = td;
    for (int k = 0; k < n; ++k) p.regular_split.push_back(nI + k);
    p.cls = nI == 0 ? PhaseClass::Q : PhaseClass::Q_gen;
    return p;
  };
  PhaseConstruction out;
  out.I = g.I;
  out.e = make(g.faces[0]);
  out.psi = make(g.faces[1]);

  auto pts = graph_samples(g);
  // graph point of a face: x^I = X, y = Y; the stationary phase conditions must hold there
  auto on_graph = [&](const FaceGenerator& F, Point p) {
    auto X = VectorTape(F.X.empty() ? std::vector<Expr>{Expr(0.0)} : F.X)(p);
    auto Y = VectorTape(F.Y)(p);
    for (int a = 0; a < nI; ++a) p.x[g.I[a]] = X[a];
    for (int k = 0; k < n; ++k) p.y[k] = Y[k];
    return p;
  };
  for (int f = 0; f < 2; ++f) {
    const FaceGenerator& F = g.faces[f];
    Expr phi = (f == 0 ? out.e : out.psi).phase();
    std::vector<Expr> lhs, rhs;
    for (int a = 0; a < td; ++a) {
      lhs.push_back(diff(phi, Block::xi, a));
      rhs.push_back(Expr(0.0));
    }
    for (std::size_t b = 0; b < g.J.size(); ++b) {
      lhs.push_back(diff(phi, Block::x, g.J[b]));
      rhs.push_back(F.Xi[b]);
    }
    VectorTape tl(lhs), tr(rhs);
    for (auto& p0 : pts) {
      Point p = on_graph(F, p0);
      auto u = tl(p), v = tr(p);
      for (std::size_t r = 0; r < u.size(); ++r)
        out.stationarity = std::max(out.stationarity, std::abs(u[r] - v[r]) / std::max(1.0, std::abs(v[r])));
    }
  }
  auto se = principal_part(SymbolExpr{out.e.phase(), n, BiOrder::diag(1), td}, Face::psi, BiOrder::diag(1));
  auto sp = principal_part(SymbolExpr{out.psi.phase(), n, BiOrder::diag(1), td}, Face::e, BiOrder::diag(1));
  if (!se || !sp) throw NonConvergent("phase leading parts cancel");
  Tape a(se->ast), b(sp->ast);
  for (auto& p0 : pts) {
    Point p = on_graph(g.faces[2], p0);
    cplx u = a(p), v = b(p);
    out.compatibility = std::max(out.compatibility, std::abs(u - v) / std::max(1.0, std::abs(v)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hamiltonian of a homogeneous vector field (gamma, rho): gamma = dc/dxi, rho = -dc/dx.

struct HamiltonianResult {
  SymbolExpr c;
  double closedness = 0.0;
  double roundtrip = 0.0;
};

inline double normalised_gap(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t s = 0; s < a.size(); ++s)
    for (std::size_t i = 0; i < a[s].size(); ++i) {
      diff = std::max(diff, std::abs(a[s][i] - b[s][i]));
      scale = std::max({scale, std::abs(a[s][i]), std::abs(b[s][i])});
    }
  return scale == 0.0 ? 0.0 : diff / scale;
}

inline HamiltonianResult hamiltonian_from_field(const std::vector<Expr>& gamma, const std::vector<Expr>& rho, int l,
                                                Face face, double tol = kGradientTolerance) {
  const int n = static_cast<int>(gamma.size());
  if (n < 1 || static_cast<int>(rho.size()) != n) throw DomainError("gamma and rho must have n components");
  if (l <= 1) throw DomainError("l must be an integer > 1");
  if (face == Face::psie) throw DomainError("face must be e or psi");
  auto pts = shell_samples(n, 64, 0.5, 8.0, kSampleSeed + 2);
  auto sample = [&](const std::vector<Expr>& v) {
    VectorTape t(v);
    std::vector<std::vector<double>> out;
    for (auto& p : pts) out.push_back(t(p));
    return out;
  };

  // closedness: d gamma^i/d xi_j symmetric, d rho_i/d x^j symmetric, d gamma^i/d x^j = -d rho_j/d xi_i
  std::vector<Expr> a1, b1, a2, b2, a3, b3;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      a1.push_back(diff(gamma[i], Block::xi, j));
      b1.push_back(diff(gamma[j], Block::xi, i));
      a2.push_back(diff(rho[i], Block::x, j));
      b2.push_back(diff(rho[j], Block::x, i));
      a3.push_back(diff(gamma[i], Block::x, j));
      b3.push_back(-diff(rho[j], Block::xi, i));
    }
  HamiltonianResult r;
  r.closedness = std::max({normalised_gap(sample(a1), sample(b1)), normalised_gap(sample(a2), sample(b2)),
                           normalised_gap(sample(a3), sample(b3))});
  if (r.closedness > tol) throw NotClosed("dual 1-form residual " + std::to_string(r.closedness));

  // homogeneity: psi face gamma ~ xi^-l, rho ~ xi^(1-l); e face gamma ~ x^(1-l), rho ~ x^-l
  const int dg = face == Face::psi ? -l : 1 - l, dr = face == Face::psi ? 1 - l : -l;
  const Face scaled = face == Face::psi ? Face::psi : Face::e;
  VectorTape tg(gamma), tr(rho);
  std::vector<std::vector<double>> base, moved;
  for (auto& p : pts) {
    auto g0 = tg(p), r0 = tr(p);
    auto g1 = tg(scale_point(p, scaled, 2.0)), r1 = tr(scale_point(p, scaled, 2.0));
    std::vector<double> u, v;
    for (int i = 0; i < n; ++i) {
      u.push_back(std::ldexp(g0[i], dg));
      v.push_back(g1[i]);
      u.push_back(std::ldexp(r0[i], dr));
      v.push_back(r1[i]);
    }
    base.push_back(u);
    moved.push_back(v);
  }
  if (normalised_gap(base, moved) > tol) throw DegreeOrderViolation("field homogeneity does not match l");

  std::vector<Expr> t;
  if (face == Face::psi) {
    for (int j = 0; j < n; ++j) t.push_back(Expr::xi(j) * gamma[j]);
    r.c = make_symbol(Expr(1.0 / (1 - l)) * sum(t), n, BiOrder::diag(1 - l));
  } else {
    for (int j = 0; j < n; ++j) t.push_back(Expr::x(j) * rho[j]);
    r.c = make_symbol(Expr(1.0 / (l - 1)) * sum(t), n, BiOrder::diag(1 - l));
  }
  std::vector<Expr> hg, hr;
  for (int k = 0; k < n; ++k) {
    hg.push_back(diff(r.c.ast, Block::xi, k));
    hr.push_back(-diff(r.c.ast, Block::x, k));
  }
  r.roundtrip = std::max(normalised_gap(sample(hg), sample(gamma)), normalised_gap(sample(hr), sample(rho)));
  if (r.roundtrip > tol) throw NotClosed("Hamilton field does not reproduce the input: " + std::to_string(r.roundtrip));
  return r;
}

// Hamilton field (dc/dxi, -dc/dx) of a symbol.
inline std::pair<std::vector<Expr>, std::vector<Expr>> hamilton_field(const Expr& c, int n) {
  std::vector<Expr> g, r;
  for (int k = 0; k < n; ++k) {
    g.push_back(diff(c, Block::xi, k));
    r.push_back(-diff(c, Block::x, k));
  }
  return {g, r};
}

}  // namespace sgcalc
