#pragma once

// Type-Q Fourier integral operators on the periodic grid:
//   FIO(phi, a)u(x) = int exp(i (f(x, theta) + g(y, theta))) a(x, y, theta) u(y) dy dbar theta.
// theta lives in the xi block of expressions.

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sgcalc/errors.hpp"
#include "sgcalc/expr.hpp"
#include "sgcalc/grid.hpp"
#include "sgcalc/parallel.hpp"
#include "sgcalc/phase.hpp"
#include "sgcalc/psdo.hpp"
#include "sgcalc/scatgeo.hpp"
#include "sgcalc/symbols.hpp"

namespace sgcalc {

// band is a sharp spectral projection |theta_i| <= band * pi/dx applied to the theta sum. It is a
// discretisation device (dilations push phase gradients past Nyquist), not part of the amplitude.
struct FIOHandle {
  PhasePair phase;
  Amplitude amplitude;
  GridSpec grid;
  double band = 1.0;

  int dim() const { return phase.dim(); }
};

// ---------------------------------------------------------------------------
// Phase validation.

struct PhaseCondition {
  std::string name;
  double min = 0.0, max = 0.0;
  bool pass = true;
};

struct QPhaseReport {
  std::vector<PhaseCondition> conditions;
  bool ok = true;

  const PhaseCondition& operator[](const std::string& name) const {
    for (const auto& c : conditions)
      if (c.name == name) return c;
    throw DomainError("no phase condition " + name);
  }
};

struct QSupport {
  DyadicGrid grid = DyadicGrid::standard(8, 16);
  double ratio_cap = kRatioCap;
};

namespace detail {

inline std::vector<int> regular_columns(const PhasePair& p) {
  if (!p.regular_split.empty()) {
    if (static_cast<int>(p.regular_split.size()) != p.dim()) throw DomainError("regular split must select n variables");
    for (int i : p.regular_split)
      if (i < 0 || i >= p.theta_dim) throw DomainError("regular split index out of range");
    return p.regular_split;
  }
  if (p.theta_dim != p.dim()) throw DomainError("Q_gen phase needs a regular split");
  std::vector<int> r(p.dim());
  for (int i = 0; i < p.dim(); ++i) r[i] = i;
  return r;
}

// g(y, theta) rewritten in the x block so that both components share the (x, theta) samples.
inline Expr y_to_x(const Expr& g, int n) { return substitute_blocks(g, {}, {}, Expr::vars(Block::x, n)); }

inline Expr x_to_y(const Expr& f, int n) { return substitute_blocks(f, Expr::vars(Block::y, n), {}); }

inline double vnorm(const cplx* v, int k) {
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += std::norm(v[i]);
  return std::sqrt(s);
}

inline double jap_norm(const cplx* v, int k) { return std::sqrt(1.0 + vnorm(v, k) * vnorm(v, k)); }

inline double real_det(const cplx* m, int n) {
  Matrix a(n, std::vector<double>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a[i][j] = m[i * n + j].real();
  return determinant(a);
}

}  // namespace detail

// Two-sided equivalences are checked as ratios in [1/c, c] over dyadic (x, theta) samples; the
// determinant bound as |det| >= 1/c; the mixed Hessian bound (Q_gen) as max |entry| <= c.
inline QPhaseReport validate_q_phase(const PhasePair& p, const QSupport& sup = {}) {
  const int n = p.dim(), td = p.theta_dim;
  if (p.g.dim != n) throw DomainError("phase components differ in dimension");
  const auto reg = detail::regular_columns(p);
  const double c = sup.ratio_cap;
  QPhaseReport rep;
  auto add = [&](std::string name, double lo, double hi, bool pass) {
    rep.conditions.push_back({std::move(name), lo, hi, pass});
    rep.ok = rep.ok && pass;
  };

  Expr g = detail::y_to_x(p.g.ast, n);
  const BiOrder one = BiOrder::diag(1);
  SymbolExpr fs{p.f.ast, n, one, td}, gs{g, n, one, td};
  auto ef = check_sg_estimate(fs, one, 2, sup.grid), eg = check_sg_estimate(gs, one, 2, sup.grid);
  add("f_order_1", ef.worst(), ef.worst(), ef.pass);
  add("g_order_1", eg.worst(), eg.worst(), eg.pass);

  // roots: grad_x f, grad_x g, grad_theta_reg f, grad_theta_reg g, mixed Hessians (n x n each)
  std::vector<Expr> roots;
  const std::array<const Expr*, 2> fg{&p.f.ast, &g};
  for (const Expr* e : fg)
    for (int i = 0; i < n; ++i) roots.push_back(diff(*e, Block::x, i));
  for (const Expr* e : fg)
    for (int j : reg) roots.push_back(diff(*e, Block::xi, j));
  for (const Expr* e : fg)
    for (int i = 0; i < n; ++i)
      for (int j : reg) roots.push_back(diff(diff(*e, Block::x, i), Block::xi, j));
  Tape t(roots);
  auto samples = product_samples({{Block::x, n, 1.0}, {Block::xi, td, 1.0}}, sup.grid);
  const std::size_t R = roots.size();
  std::vector<cplx> vals(samples.size() * R);
  parallel_for(samples.size(), [&](std::size_t k) { t.eval_all(samples[k].p, &vals[k * R]); });

  struct Range {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    void add(double v) {
      if (!std::isfinite(v)) v = std::numeric_limits<double>::infinity();
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  };
  Range gxf, gxg, gtf, gtg, detf, detg, mixf, mixg;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const cplx* v = &vals[k * R];
    const double jx = jap_r(samples[k].radius[0]), jt = jap_r(samples[k].radius[1]);
    gxf.add(detail::jap_norm(v, n) / jt);
    gxg.add(detail::jap_norm(v + n, n) / jt);
    gtf.add(detail::jap_norm(v + 2 * n, n) / jx);
    gtg.add(detail::jap_norm(v + 3 * n, n) / jx);
    const cplx* hf = v + 4 * n;
    const cplx* hg = hf + n * n;
    detf.add(std::abs(detail::real_det(hf, n)));
    detg.add(std::abs(detail::real_det(hg, n)));
    for (int i = 0; i < n * n; ++i) {
      mixf.add(std::abs(hf[i]));
      mixg.add(std::abs(hg[i]));
    }
  }
  auto two_sided = [&](const Range& r) { return r.lo >= 1.0 / c && r.hi <= c; };
  add("grad_x_f~<theta>", gxf.lo, gxf.hi, two_sided(gxf));
  add("grad_y_g~<theta>", gxg.lo, gxg.hi, two_sided(gxg));
  add("grad_theta_f~<x>", gtf.lo, gtf.hi, two_sided(gtf));
  add("grad_theta_g~<y>", gtg.lo, gtg.hi, two_sided(gtg));
  add("det_x_theta_f>=1", detf.lo, detf.hi, detf.lo >= 1.0 / c);
  add("det_y_theta_g>=1", detg.lo, detg.hi, detg.lo >= 1.0 / c);
  add("mixed_f<=1", mixf.lo, mixf.hi, mixf.hi <= c);
  add("mixed_g<=1", mixg.lo, mixg.hi, mixg.hi <= c);
  return rep;
}

// ---------------------------------------------------------------------------
// Closed-form family: f = (L x - b).theta + k.x, g = -y.theta.

struct LinearPhase {
  Matrix L;
  std::vector<double> b, k;
};

inline PhasePair linear_phase(const LinearPhase& lp) {
  const int n = static_cast<int>(lp.L.size());
  auto x = Expr::vars(Block::x, n), th = Expr::vars(Block::xi, n), y = Expr::vars(Block::y, n);
  auto Lx = mat_vec(lp.L, x);
  std::vector<Expr> ft, gt;
  for (int i = 0; i < n; ++i) {
    ft.push_back((Lx[i] - Expr(lp.b[i])) * th[i]);
    if (lp.k[i] != 0.0) ft.push_back(Expr(lp.k[i]) * x[i]);
    gt.push_back(-(y[i] * th[i]));
  }
  PhasePair p;
  p.f = SymbolExpr{sum(ft), n, BiOrder::diag(1), n};
  p.g = SymbolExpr{sum(gt), n, BiOrder::diag(1), n};
  p.theta_dim = n;
  for (int i = 0; i < n; ++i) p.regular_split.push_back(i);
  return p;
}

// Reads L, b, k off the derivatives of f and checks the reconstruction (and g = -y.theta) on samples.
inline std::optional<LinearPhase> detect_linear_phase(const PhasePair& p) {
  const int n = p.dim();
  if (p.theta_dim != n) return std::nullopt;
  LinearPhase lp;
  lp.L.assign(n, std::vector<double>(n, 0.0));
  lp.b.assign(n, 0.0);
  lp.k.assign(n, 0.0);
  Point zero;
  try {
    for (int i = 0; i < n; ++i) {
      Expr dti = diff(p.f.ast, Block::xi, i);
      lp.b[i] = -Tape(dti)(zero).real();
      lp.k[i] = Tape(diff(p.f.ast, Block::x, i))(zero).real();
      for (int j = 0; j < n; ++j) lp.L[i][j] = Tape(diff(dti, Block::x, j))(zero).real();
    }
    auto cand = linear_phase(lp);
    Tape df(p.f.ast - cand.f.ast), dg(p.g.ast - cand.g.ast);
    for (const auto& s : shell_samples(n, 64, 0.5, 200.0, kSampleSeed)) {
      Point q = s;
      q.y = s.x;
      const double scale = (1.0 + block_norm(q.x, n)) * (1.0 + block_norm(q.xi, n));
      if (std::abs(df(q)) > 1e-10 * scale || std::abs(dg(q)) > 1e-10 * scale) return std::nullopt;
    }
  } catch (const DomainError&) {
    return std::nullopt;
  }
  if (std::abs(determinant(lp.L)) < 1e-12) return std::nullopt;
  return lp;
}

// Pullback map of the conjugation A^# P A: (x, xi) -> (L^-1 (x + b), L^T xi + k).
inline CanonicalMap linear_fio_map(const LinearPhase& lp) {
  const int n = static_cast<int>(lp.L.size());
  auto x = Expr::vars(Block::x, n), xi = Expr::vars(Block::xi, n);
  Matrix Li = inverse(lp.L), Lt = transpose(lp.L);
  std::vector<Expr> xb, y, eta, Xi, Y;
  for (int i = 0; i < n; ++i) xb.push_back(x[i] + Expr(lp.b[i]));
  y = mat_vec(Li, xb);
  eta = mat_vec(Lt, xi);
  for (int i = 0; i < n; ++i)
    if (lp.k[i] != 0.0) eta[i] = eta[i] + Expr(lp.k[i]);
  std::vector<Expr> ek;
  for (int i = 0; i < n; ++i) ek.push_back(xi[i] - Expr(lp.k[i]));
  Xi = mat_vec(transpose(Li), ek);
  Y = y;
  return {"linear-fio", n, y, eta, Xi, Y};
}

inline FIOHandle make_fio(const PhasePair& p, const Expr& amp, const GridSpec& s, double band = 1.0,
                          std::array<int, 3> order = {0, 0, 0}) {
  return {p, Amplitude{amp, p.dim(), order, p.theta_dim}, s, band};
}

inline FIOHandle standard_fio(const GridSpec& s, const Expr& amp = Expr(1.0), std::array<int, 3> order = {0, 0, 0}) {
  return make_fio(PhasePair::standard(s.n), amp, s, 1.0, order);
}

inline Matrix identity_matrix(int n) {
  Matrix m(n, std::vector<double>(n, 0.0));
  for (int i = 0; i < n; ++i) m[i][i] = 1.0;
  return m;
}

// u -> u(x - a); grid-commensurate shifts act as exact circular shifts.
inline FIOHandle translation_fio(const GridSpec& s, const std::vector<double>& a) {
  return make_fio(linear_phase({identity_matrix(s.n), a, std::vector<double>(s.n, 0.0)}), Expr(1.0), s);
}

// u -> u(c x), band limited to |theta| <= pi/(c dx).
inline FIOHandle dilation_fio(const GridSpec& s, double c) {
  if (!(c >= 1.0)) throw DomainError("dilation factor must be >= 1");
  Matrix L = identity_matrix(s.n);
  for (auto& r : L)
    for (auto& v : r) v *= c;
  return make_fio(linear_phase({L, std::vector<double>(s.n, 0.0), std::vector<double>(s.n, 0.0)}), Expr(1.0), s,
                  1.0 / c);
}

// u -> exp(i k.x) u with the band shrunk so that |theta + k| stays below Nyquist.
inline FIOHandle modulation_fio(const GridSpec& s, const std::vector<double>& k) {
  double km = 0.0;
  for (double v : k) km = std::max(km, std::abs(v));
  const double band = 1.0 - km / s.xi_max();
  if (!(band > 0.0)) throw GridTooCoarse("modulation beyond the dual grid");
  return make_fio(linear_phase({identity_matrix(s.n), std::vector<double>(s.n, 0.0), k}), Expr(1.0), s, band);
}

// grad_x f = L^T theta, so the band is limited by the largest column sum of L.
inline FIOHandle linear_fio(const GridSpec& s, const Matrix& L) {
  double col = 0.0;
  for (auto& r : transpose(L)) {
    double t = 0.0;
    for (double v : r) t += std::abs(v);
    col = std::max(col, t);
  }
  return make_fio(linear_phase({L, std::vector<double>(s.n, 0.0), std::vector<double>(s.n, 0.0)}), Expr(1.0), s,
                  std::min(1.0, 1.0 / col));
}

// ---------------------------------------------------------------------------
// Grid application.

namespace detail {

inline bool in_band(const GridSpec& s, const double* th, double band) {
  if (band >= 1.0) return true;
  for (int i = 0; i < s.n; ++i)
    if (std::abs(th[i]) > band * s.xi_max() * (1.0 + 1e-12)) return false;
  return true;
}

inline cplx unit_phase(cplx ph) {
  if (std::abs(ph.imag()) > 1e-9 * std::max(1.0, std::abs(ph.real()))) throw DomainError("phase is not real");
  return std::exp(cplx(0.0, ph.real()));
}

inline constexpr std::size_t kPhaseTableLimit = std::size_t(1) << 22;

// exp(i phi(z_l, theta_k)) for one phase component, z in the x or y block. Phases affine in theta,
// phi = c(z) + sum_i l_i(z) theta_i, factor over the theta axes; others are tabulated when small and
// evaluated on the fly otherwise.
class PhaseKernel {
 public:
  PhaseKernel(const GridSpec& s, const Expr& phi, Block space) : s_(s), M_(s.total()), space_(space) {
    std::vector<Expr> lin;
    bool affine = true;
    for (int i = 0; i < s.n && affine; ++i) {
      lin.push_back(diff(phi, Block::xi, i));
      if (uses(lin.back()) & 2u) affine = false;
    }
    if (affine) {
      mode_ = Mode::affine;
      std::vector<Expr> zeros(s.n, Expr(0.0));
      std::vector<Expr> roots{substitute_blocks(phi, {}, zeros)};
      roots.insert(roots.end(), lin.begin(), lin.end());
      Tape t(roots);
      base_.resize(M_);
      axis_.assign(s.n, std::vector<cplx>(M_ * s.N));
      parallel_for(M_, [&](std::size_t l) {
        Point p = at(l);
        cplx v[3];
        t.eval_all(p, v);
        base_[l] = unit_phase(v[0]);
        for (int i = 0; i < s.n; ++i) {
          if (std::abs(v[1 + i].imag()) > 1e-9 * std::max(1.0, std::abs(v[1 + i].real())))
            throw DomainError("phase is not real");
          for (int m = 0; m < s.N; ++m) axis_[i][l * s.N + m] = std::exp(cplx(0.0, v[1 + i].real() * s.xi(m)));
        }
      });
      return;
    }
    tape_ = std::make_shared<Tape>(phi);
    if (M_ * M_ <= kPhaseTableLimit) {
      mode_ = Mode::table;
      table_.resize(M_ * M_);
      parallel_for(M_, [&](std::size_t l) {
        Point p = at(l);
        for (std::size_t k = 0; k < M_; ++k) {
          s_.point_xi(k, p.xi.data());
          table_[l * M_ + k] = unit_phase((*tape_)(p));
        }
      });
    } else {
      mode_ = Mode::direct;
    }
  }

  // out_l = sum_k E(l, k) w_k
  std::vector<cplx> synthesize(const std::vector<cplx>& w) const {
    std::vector<cplx> out(M_);
    const std::size_t N = s_.N;
    parallel_for(M_, [&](std::size_t l) {
      cplx acc = 0.0;
      if (mode_ == Mode::affine) {
        const cplx* e0 = &axis_[0][l * N];
        if (s_.n == 1) {
          for (std::size_t k = 0; k < N; ++k) acc += e0[k] * w[k];
        } else {
          const cplx* e1 = &axis_[1][l * N];
          for (std::size_t k0 = 0; k0 < N; ++k0) {
            cplx inner = 0.0;
            const cplx* wr = &w[k0 * N];
            for (std::size_t k1 = 0; k1 < N; ++k1) inner += e1[k1] * wr[k1];
            acc += e0[k0] * inner;
          }
        }
        acc *= base_[l];
      } else {
        for (std::size_t k = 0; k < M_; ++k)
          if (w[k] != 0.0) acc += entry(l, k) * w[k];
      }
      out[l] = acc;
    });
    return out;
  }

  // out_k = sum_l E(l, k) v_l
  std::vector<cplx> analyse(const std::vector<cplx>& v) const {
    std::vector<cplx> out(M_);
    const std::size_t N = s_.N;
    if (mode_ == Mode::affine) {
      std::vector<cplx> bv(M_);
      for (std::size_t l = 0; l < M_; ++l) bv[l] = base_[l] * v[l];
      parallel_for(M_, [&](std::size_t k) {
        auto ki = s_.index(k);
        cplx acc = 0.0;
        const cplx* e0 = axis_[0].data();
        if (s_.n == 1) {
          for (std::size_t l = 0; l < M_; ++l) acc += e0[l * N + ki[0]] * bv[l];
        } else {
          const cplx* e1 = axis_[1].data();
          for (std::size_t l = 0; l < M_; ++l) acc += e0[l * N + ki[0]] * e1[l * N + ki[1]] * bv[l];
        }
        out[k] = acc;
      });
      return out;
    }
    parallel_for(M_, [&](std::size_t k) {
      cplx acc = 0.0;
      for (std::size_t l = 0; l < M_; ++l) acc += entry(l, k) * v[l];
      out[k] = acc;
    });
    return out;
  }

  bool affine() const { return mode_ == Mode::affine; }

 private:
  enum class Mode { affine, table, direct };

  Point at(std::size_t l) const {
    Point p;
    s_.point_x(l, space_ == Block::x ? p.x.data() : p.y.data());
    return p;
  }

  cplx entry(std::size_t l, std::size_t k) const {
    switch (mode_) {
      case Mode::affine: {
        auto ki = s_.index(k);
        cplx v = base_[l] * axis_[0][l * s_.N + ki[0]];
        if (s_.n == 2) v *= axis_[1][l * s_.N + ki[1]];
        return v;
      }
      case Mode::table: return table_[l * M_ + k];
      case Mode::direct: {
        Point p = at(l);
        s_.point_xi(k, p.xi.data());
        return unit_phase((*tape_)(p));
      }
    }
    return 0.0;
  }

  GridSpec s_;
  std::size_t M_;
  Block space_;
  Mode mode_ = Mode::direct;
  std::vector<cplx> base_, table_;
  std::vector<std::vector<cplx>> axis_;
  std::shared_ptr<Tape> tape_;
};

// max_i |d_{z_i} phi(z_l, theta_k)| over all grid points z_l and the given theta indices. Phases affine in
// theta reduce to grad c(z) + sum_i theta_i grad l_i(z); other phases are evaluated directly (on a strided
// subset of z when the product is large).
inline double max_phase_gradient(const GridSpec& s, const Expr& phi, Block space,
                                 const std::vector<std::size_t>& active) {
  const int n = s.n;
  const std::size_t M = s.total();
  std::vector<Expr> lin;
  bool affine = true;
  for (int i = 0; i < n && affine; ++i) {
    lin.push_back(diff(phi, Block::xi, i));
    if (uses(lin.back()) & 2u) affine = false;
  }
  std::vector<Expr> roots;
  std::vector<Expr> zeros(n, Expr(0.0));
  if (affine) {
    Expr c = substitute_blocks(phi, {}, zeros);
    for (int d = 0; d < n; ++d) roots.push_back(diff(c, space, d));
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < n; ++d) roots.push_back(diff(lin[i], space, d));
  } else {
    for (int d = 0; d < n; ++d) roots.push_back(diff(phi, space, d));
  }
  Tape t(roots);
  std::vector<std::array<double, 2>> th;
  for (std::size_t k : active) {
    std::array<double, 2> v{0, 0};
    s.point_xi(k, v.data());
    th.push_back(v);
  }
  const std::size_t stride = affine ? 1 : std::max<std::size_t>(1, M * th.size() / kPhaseTableLimit);
  std::vector<double> worst(M, 0.0);
  parallel_for((M + stride - 1) / stride, [&](std::size_t jj) {
    const std::size_t j = jj * stride;
    Point p;
    s.point_x(j, space == Block::x ? p.x.data() : p.y.data());
    cplx v[6];
    double w = 0.0;
    if (affine) {
      t.eval_all(p, v);
      for (const auto& q : th)
        for (int d = 0; d < n; ++d) {
          cplx g = v[d];
          for (int i = 0; i < n; ++i) g += q[i] * v[n + i * n + d];
          w = std::max(w, std::abs(g));
        }
    } else {
      for (const auto& q : th) {
        for (int i = 0; i < n; ++i) p.xi[i] = q[i];
        t.eval_all(p, v);
        for (int d = 0; d < n; ++d) w = std::max(w, std::abs(v[d]));
      }
    }
    worst[j] = w;
  });
  return *std::max_element(worst.begin(), worst.end());
}

}  // namespace detail

inline GridOperator fio_operator(const FIOHandle& A) {
  const GridSpec s = A.grid;
  s.validate();
  const int n = s.n;
  if (A.phase.dim() != n || A.amplitude.dim != n) throw DomainError("FIO and grid dimensions differ");
  if (A.phase.theta_dim != n) throw UnsupportedPhase("grid application needs theta_dim == n");
  const std::size_t M = s.total();

  auto sep = detail::separate(A.amplitude.ast);
  std::vector<std::vector<cplx>> hall;
  if (sep)
    for (auto& t : *sep) hall.push_back(detail::table_x(s, t.fxi, Block::xi));
  std::vector<char> mask(M, 0);
  std::vector<std::size_t> active;
  for (std::size_t k = 0; k < M; ++k) {
    double th[2] = {0, 0};
    s.point_xi(k, th);
    if (!detail::in_band(s, th, A.band)) continue;
    bool any = !sep;
    for (auto& col : hall) any = any || col[k] != 0.0;
    if (any) {
      mask[k] = 1;
      active.push_back(k);
    }
  }
  const std::size_t K = active.size();

  // Nyquist guard over x (and y) grid points and the active theta set.
  {
    const double m = std::max(detail::max_phase_gradient(s, A.phase.f.ast, Block::x, active),
                              detail::max_phase_gradient(s, A.phase.g.ast, Block::y, active));
    if (!(m <= s.xi_max() * (1.0 + 1e-9)))
      throw GridTooCoarse("phase gradient " + std::to_string(m) + " exceeds the dual half-width " +
                          std::to_string(s.xi_max()));
  }

  const double w = std::pow(s.dx() * s.dxi() / (2.0 * std::numbers::pi), n);

  if (!sep) {
    if (M * K * M > (std::size_t(1) << 28)) throw DomainError("non-separable amplitude too large for direct summation");
    auto tf = std::make_shared<Tape>(A.phase.f.ast);
    auto tg = std::make_shared<Tape>(A.phase.g.ast);
    auto ta = std::make_shared<Tape>(A.amplitude.ast);
    auto act = std::make_shared<std::vector<std::size_t>>(std::move(active));
    return {s, [s, tf, tg, ta, act, M, w](const GridFunction& in) {
              GridFunction out(s);
              parallel_for(M, [&](std::size_t j) {
                Point p;
                s.point_x(j, p.x.data());
                cplx acc = 0.0;
                for (std::size_t k : *act) {
                  s.point_xi(k, p.xi.data());
                  cplx inner = 0.0;
                  for (std::size_t l = 0; l < M; ++l) {
                    s.point_x(l, p.y.data());
                    inner += detail::unit_phase((*tg)(p)) * (*ta)(p) * in.v[l];
                  }
                  acc += detail::unit_phase((*tf)(p)) * inner;
                }
                out.v[j] = acc * w;
              });
              detail::check_finite_table(out.v);
              return out;
            }};
  }

  struct Part {
    std::vector<cplx> fx, fy, h;  // h masked to the active theta set
  };
  auto parts = std::make_shared<std::vector<Part>>();
  for (std::size_t t = 0; t < sep->size(); ++t) {
    Part pt{detail::table_x(s, (*sep)[t].fx, Block::x), detail::table_x(s, (*sep)[t].fy, Block::y), hall[t]};
    for (std::size_t k = 0; k < M; ++k)
      if (!mask[k]) pt.h[k] = 0.0;
    parts->push_back(std::move(pt));
  }
  auto F = std::make_shared<detail::PhaseKernel>(s, A.phase.f.ast, Block::x);
  auto G = std::make_shared<detail::PhaseKernel>(s, A.phase.g.ast, Block::y);
  return {s, [s, parts, F, G, M, w](const GridFunction& in) {
            GridFunction out(s);
            for (const auto& pt : *parts) {
              std::vector<cplx> v(M);
              for (std::size_t l = 0; l < M; ++l) v[l] = pt.fy[l] * in.v[l];
              auto wk = G->analyse(v);
              for (std::size_t k = 0; k < M; ++k) wk[k] *= pt.h[k];
              auto r = F->synthesize(wk);
              for (std::size_t j = 0; j < M; ++j) out.v[j] += pt.fx[j] * r[j] * w;
            }
            detail::check_finite_table(out.v);
            return out;
          }};
}

inline GridFunction apply_fio(const FIOHandle& A, const GridFunction& u) { return fio_operator(A)(u); }

// ---------------------------------------------------------------------------
// Adjoint: phase -g(x, theta) - f(y, theta), amplitude conj a(y, x, theta).

inline FIOHandle fio_adjoint(const FIOHandle& A) {
  const int n = A.dim();
  auto xs = Expr::vars(Block::x, n), ys = Expr::vars(Block::y, n);
  FIOHandle B = A;
  B.phase.f.ast = -detail::y_to_x(A.phase.g.ast, n);
  B.phase.g.ast = -detail::x_to_y(A.phase.f.ast, n);
  B.amplitude.ast = conj(substitute_blocks(A.amplitude.ast, ys, {}, xs));
  B.amplitude.order = {A.amplitude.order[1], A.amplitude.order[0], A.amplitude.order[2]};
  return B;
}

// max over battery pairs of |<Au, v> - <u, A^dag v>| / max(1, |<Au, v>|).
inline double adjoint_defect(const FIOHandle& A, const std::vector<GridFunction>& bat) {
  auto Op = fio_operator(A), Od = fio_operator(fio_adjoint(A));
  std::vector<GridFunction> au, dv;
  for (auto& u : bat) {
    au.push_back(Op(u));
    dv.push_back(Od(u));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < bat.size(); ++i)
    for (std::size_t j = 0; j < bat.size(); ++j) {
      cplx l = inner_product(au[i], bat[j]), r = inner_product(bat[i], dv[j]);
      worst = std::max(worst, std::abs(l - r) / std::max(1.0, std::abs(l)));
    }
  return worst;
}

// ---------------------------------------------------------------------------
// Type I o type II composition.

inline constexpr double kPhaseMatchTolerance = 1e-10;

struct CompositionRecord {
  PhasePair phase;
  FIOHandle composed;
  double cancellation = 0.0;  // sup |g_A + r_B| / (<y><theta>)
  double grid_residual = 0.0;  // battery residual of composed vs sequential application
};

// A has g(y, theta) = -r(y, theta) where r is B's x-component; then AB has phase f_A + s_B and leading
// amplitude a(x, z*, theta) b(z*, y, theta) with z* = -grad_theta s_B(y, theta) (r = z.theta).
inline CompositionRecord compose_type_I_II(const FIOHandle& A, const FIOHandle& B) {
  const int n = A.dim();
  if (B.dim() != n || A.phase.theta_dim != B.phase.theta_dim) throw PhaseMismatch("theta dimensions differ");
  if (A.grid.n != B.grid.n || A.grid.N != B.grid.N || A.grid.L != B.grid.L) throw DomainError("grids differ");
  auto ys = Expr::vars(Block::y, n);
  Expr h = A.phase.g.ast + detail::x_to_y(B.phase.f.ast, n);
  CompositionRecord rec;
  {
    Tape t(h);
    auto samples = product_samples({{Block::y, n, 1.0}, {Block::xi, A.phase.theta_dim, 1.0}}, DyadicGrid::standard(8, 8));
    for (auto& smp : samples)
      rec.cancellation = std::max(rec.cancellation, std::abs(t(smp.p)) / (jap_r(smp.radius[0]) * jap_r(smp.radius[1])));
  }
  if (rec.cancellation > kPhaseMatchTolerance)
    throw PhaseMismatch("g_A + r_B = " + std::to_string(rec.cancellation) + " on samples");
  // r_B must be z.theta for the delta collapse; checked through the same cancellation against -y.theta
  {
    Expr lin = B.phase.f.ast;
    for (int i = 0; i < n; ++i) lin = lin - Expr::x(i) * Expr::xi(i);
    Tape t(lin);
    for (auto& smp : product_samples({{Block::x, n, 1.0}, {Block::xi, n, 1.0}}, DyadicGrid::standard(8, 8)))
      if (std::abs(t(smp.p)) > kPhaseMatchTolerance * jap_r(smp.radius[0]) * jap_r(smp.radius[1]))
        throw PhaseMismatch("second factor is not of type II (f = x.theta)");
  }
  std::vector<Expr> zstar;
  for (int i = 0; i < n; ++i) zstar.push_back(-diff(B.phase.g.ast, Block::xi, i));
  Expr a = substitute_blocks(A.amplitude.ast, {}, {}, zstar);
  Expr b = substitute_blocks(B.amplitude.ast, zstar, {});
  rec.phase.f = A.phase.f;
  rec.phase.g = B.phase.g;
  rec.phase.theta_dim = A.phase.theta_dim;
  rec.phase.regular_split = A.phase.regular_split;
  rec.phase.cls = A.phase.theta_dim == n ? PhaseClass::Q : PhaseClass::Q_gen;
  std::array<int, 3> ord{A.amplitude.order[0] + B.amplitude.order[0], A.amplitude.order[1] + B.amplitude.order[1],
                         A.amplitude.order[2] + B.amplitude.order[2]};
  rec.composed = make_fio(rec.phase, a * b, A.grid, std::min(A.band, B.band), ord);
  auto bat = test_battery(A.grid);
  rec.grid_residual = battery_residual(fio_operator(rec.composed), fio_operator(A) * fio_operator(B), bat);
  return rec;
}

// ---------------------------------------------------------------------------
// Parametrix for the closed-form family.
//
// A = M_k T Op(a o kappa) with T v(x) = v(L x - b). Its inverse is T^-1 Op(qhat) M_-k where qhat is the
// pseudodifferential parametrix of ahat(z, zeta) = a(z, L^-T zeta). Written as an FIO this is the reversed
// phase (-g, -f) in the rescaled frequency theta' = L^T theta + k: f# = (L^-1 (x + b)).theta',
// g# = -y.(theta' + k), amplitude qhat(L^-1 (x + b), theta'). The rescaling keeps the y-side frequencies on
// the dual grid, so translations and dilations invert exactly.

struct FIOParametrix {
  FIOHandle handle;
  int K = 0;
  double residual_right = 0.0;  // A A# - I on the battery
  double residual_left = 0.0;   // A# A - I
};

inline FIOHandle fio_parametrix_handle(const FIOHandle& A, int K) {
  auto lp = detect_linear_phase(A.phase);
  if (!lp) throw UnsupportedPhase("parametrix is implemented for f = (Lx - b).theta + k.x, g = -y.theta");
  if (uses(A.amplitude.ast) & 4u) throw UnsupportedPhase("parametrix needs a y-independent amplitude");
  const int n = A.dim();
  auto x = Expr::vars(Block::x, n), th = Expr::vars(Block::xi, n), y = Expr::vars(Block::y, n);
  Matrix Li = inverse(lp->L), LiT = transpose(Li);
  Expr ahat = substitute_blocks(A.amplitude.ast, {}, mat_vec(LiT, th));
  BiOrder m{A.amplitude.order[0], A.amplitude.order[2]};
  auto q = parametrix(classical(make_symbol(ahat, n, m)), K);
  std::vector<Expr> xb;
  for (int i = 0; i < n; ++i) xb.push_back(x[i] + Expr(lp->b[i]));
  auto z = mat_vec(Li, xb);
  std::vector<Expr> ft, gt;
  for (int i = 0; i < n; ++i) {
    ft.push_back(z[i] * th[i]);
    gt.push_back(-(y[i] * th[i]));
    if (lp->k[i] != 0.0) gt.push_back(-(Expr(lp->k[i]) * y[i]));
  }
  PhasePair p;
  p.f = SymbolExpr{sum(ft), n, BiOrder::diag(1), n};
  p.g = SymbolExpr{sum(gt), n, BiOrder::diag(1), n};
  p.theta_dim = n;
  p.regular_split = A.phase.regular_split;
  // largest band keeping |L^-T theta'| and |theta' + k| below Nyquist
  const GridSpec& s = A.grid;
  double row = 0.0, km = 0.0;
  for (auto& r : LiT) {
    double t = 0.0;
    for (double v : r) t += std::abs(v);
    row = std::max(row, t);
  }
  for (double v : lp->k) km = std::max(km, std::abs(v));
  const double band = std::min({1.0, 1.0 / row, 1.0 - km / s.xi_max()});
  return make_fio(p, substitute_blocks(q.base.ast, z, {}), s, band, {-m.m_e, 0, -m.m_psi});
}

inline FIOParametrix fio_parametrix(const FIOHandle& A, int K) {
  FIOParametrix r{fio_parametrix_handle(A, K), K};
  auto bat = test_battery(A.grid);
  auto Ao = fio_operator(A), Bo = fio_operator(r.handle), I = GridOperator::identity(A.grid);
  r.residual_right = battery_residual(Ao * Bo, I, bat);
  r.residual_left = battery_residual(Bo * Ao, I, bat);
  return r;
}

// ---------------------------------------------------------------------------
// Egorov conjugation harness.

inline constexpr double kEgorovTolerance = 1e-3;
inline constexpr double kComponentTolerance = 1e-6;

struct EgorovReport {
  std::vector<SymbolSample> samples;
  std::vector<cplx> recovered, expected;
  double grid_residual = 0.0;                // sup |rec - exp| / max(1, |exp|)
  std::array<double, 3> component_residual{};  // per face, principal parts of p o C vs pulled-back components
  double tolerance = kEgorovTolerance;
  bool ok = false;
};

// Graph check: at (X, Xi) the pulled-back point (x, xi) = C(X, Xi) must satisfy grad_theta phi = 0 and
// grad_x f = xi with theta = Xi (the closed-form family has g = -y.theta).
inline double phase_map_defect(const PhasePair& p, const CanonicalMap& C) {
  const int n = p.dim();
  std::vector<Expr> roots;
  for (int i = 0; i < n; ++i) roots.push_back(diff(p.phase(), Block::xi, i));
  for (int i = 0; i < n; ++i) roots.push_back(diff(p.f.ast, Block::x, i));
  VectorTape grad(roots), cy(C.y), ce(C.eta);
  double worst = 0.0;
  for (const auto& s : shell_samples(n, 64, 0.5, 100.0, kSampleSeed)) {
    auto x = cy(s), xi = ce(s);
    Point q;
    for (int i = 0; i < n; ++i) {
      q.x[i] = x[i];
      q.y[i] = s.x[i];
      q.xi[i] = s.xi[i];
    }
    auto g = grad(q);
    const double scale = 1.0 + block_norm(s.x, n) + block_norm(s.xi, n);
    for (int i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(g[i]) / scale);
      worst = std::max(worst, std::abs(g[n + i] - xi[i]) / scale);
    }
  }
  return worst;
}

// Inner dyadic samples whose theta and pulled-back points stay resolved on the grid.
inline std::vector<SymbolSample> egorov_samples(const FIOHandle& A, const CanonicalMap& C) {
  const GridSpec& s = A.grid;
  VectorTape cy(C.y), ce(C.eta);
  std::vector<SymbolSample> out;
  for (const auto& p : grid_dyadic_samples(s).points) {
    Point q;
    bool ok = true;
    for (int i = 0; i < s.n; ++i) {
      q.x[i] = p.x[i];
      q.xi[i] = p.xi[i];
      if (std::abs(p.xi[i]) > std::min(1.0, A.band) * s.xi_max() / 2 + 1e-12) ok = false;
    }
    auto y = cy(q), e = ce(q);
    for (int i = 0; i < s.n; ++i)
      if (std::abs(y[i]) > 0.75 * s.L || std::abs(e[i]) > s.xi_max() / 2 + 1e-12) ok = false;
    if (ok) out.push_back(p);
  }
  return out;
}

inline EgorovReport egorov_check(const FIOHandle& A, const ClassicalSymbol& P, const CanonicalMap& C,
                                 std::optional<std::vector<SymbolSample>> samples = std::nullopt,
                                 double tol = kEgorovTolerance, int K = 2, Probe probe = Probe::plane) {
  const int n = A.dim();
  if (C.n != n || P.dim() != n) throw DomainError("dimensions differ");
  const double graph = phase_map_defect(A.phase, C);
  if (graph > 1e-8) throw PhaseMismatch("phase does not parametrise the map (" + std::to_string(graph) + ")");
  EgorovReport rep;
  rep.tolerance = tol;
  rep.samples = samples ? *samples : egorov_samples(A, C);
  if (rep.samples.empty()) throw GridTooCoarse("no resolved samples for the conjugation");

  const GridSpec& s = A.grid;
  auto Ash = fio_parametrix_handle(A, K);
  auto op = fio_operator(Ash) * quantize(P, s) * fio_operator(A);
  rep.recovered = recover_symbol(op, rep.samples, probe);

  Expr pulled = substitute_blocks(P.base.ast, C.y, C.eta);
  Tape tp(pulled);
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    Point q;
    for (int d = 0; d < n; ++d) {
      q.x[d] = rep.samples[i].x[d];
      q.xi[d] = rep.samples[i].xi[d];
    }
    cplx e = tp(q);
    rep.expected.push_back(e);
    rep.grid_residual = std::max(rep.grid_residual, std::abs(rep.recovered[i] - e) / std::max(1.0, std::abs(e)));
  }

  // principal components: sigma_f(p o C) against sigma_f(p) o C_f
  SymbolExpr ps{pulled, n, P.order(), P.base.theta_dim};
  for (Face f : {Face::e, Face::psi, Face::psie}) {
    auto lhs = principal_limit(ps, f), rhs = principal_limit(P.base, f);
    VectorTape fy(face_part(C.y, n, {1, 0}, f)), fe(face_part(C.eta, n, {0, 1}, f));
    double worst = 0.0;
    for (const auto& pt : face_samples(f, n)) {
      Point q = pt;
      auto y = fy(pt), e = fe(pt);
      for (int d = 0; d < n; ++d) {
        q.x[d] = y[d];
        q.xi[d] = e[d];
      }
      cplx l = lhs(pt), r = rhs(q);
      worst = std::max(worst, std::abs(l - r) / std::max(1.0, std::abs(r)));
    }
    rep.component_residual[static_cast<int>(f)] = worst;
  }
  rep.ok = rep.grid_residual <= tol;
  for (double c : rep.component_residual) rep.ok = rep.ok && c <= kComponentTolerance;
  return rep;
}

// ---------------------------------------------------------------------------
// Order-preservation probe: recover the symbol of A^-1 Op(p) A and test it at order(p) and at the swapped
// order.

struct ProbeRow {
  std::string name;
  BiOrder order;
  bool own = false, swapped = false;
  double own_ratio = 0.0, swapped_ratio = 0.0;
};

struct OpiReport {
  std::vector<ProbeRow> rows;
  bool order_preserving = true;  // every row passes at its own order
  bool identity_pattern = true;  // own passes, swapped fails whenever the orders differ
  bool swap_pattern = true;      // swapped passes, own fails whenever the orders differ
};

struct NamedSymbol {
  std::string name;
  ClassicalSymbol symbol;
};

inline std::vector<NamedSymbol> opi_battery(int n) {
  Expr x1 = Expr::x(0), xi1 = Expr::xi(0);
  return {
      {"<x>", classical(make_symbol(jap_x(n), n, {1, 0}))},
      {"<xi>", classical(make_symbol(jap_xi(n), n, {0, 1}))},
      {"x1 xi1 <x>^-1", classical(make_symbol(x1 * xi1 * inv(jap_x(n)), n, {0, 1}))},
      {"<x>^-1", classical(make_symbol(inv(jap_x(n)), n, {-1, 0}))},
      {"<x> <xi>^-1", classical(make_symbol(jap_x(n) * inv(jap_xi(n)), n, {1, -1}))},
  };
}

inline OpiReport order_preservation_probe(const GridOperator& A, const GridOperator& Ainv,
                                          const std::vector<NamedSymbol>& battery, Probe probe = Probe::plane) {
  const GridSpec& s = A.spec;
  auto g = grid_dyadic_samples(s);
  OpiReport rep;
  for (const auto& b : battery) {
    auto vals = recover_symbol(Ainv * quantize(b.symbol, s) * A, g.points, probe);
    BiOrder m = b.symbol.order(), sw{m.m_psi, m.m_e};
    auto own = check_sampled_estimate(g.samples, vals, m, g.nshells);
    auto swp = check_sampled_estimate(g.samples, vals, sw, g.nshells);
    ProbeRow row{b.name, m, own.pass, swp.pass, own.worst(), swp.worst()};
    const bool sym = m.m_e == m.m_psi;
    rep.order_preserving = rep.order_preserving && row.own;
    rep.identity_pattern = rep.identity_pattern && row.own && (sym || !row.swapped);
    rep.swap_pattern = rep.swap_pattern && row.swapped && (sym || !row.own);
    rep.rows.push_back(row);
  }
  return rep;
}

inline OpiReport order_preservation_probe(const FIOHandle& A, const std::vector<NamedSymbol>& battery,
                                          Probe probe = Probe::plane) {
  if (!detect_linear_phase(A.phase)) throw UnsupportedPhase("probe needs an FIO from the closed-form family");
  return order_preservation_probe(fio_operator(A), fio_operator(fio_parametrix_handle(A, 2)), battery, probe);
}

}  // namespace sgcalc
