#pragma once

// Quantization on grids and the formal SG calculus.

#include <array>
#include <map>
#include <optional>
#include <vector>

#include "sgcalc/grid.hpp"
#include "sgcalc/symbols.hpp"

namespace sgcalc {

inline constexpr int kMaxTrunc = 6;
inline constexpr int kMinGridForOrder = 32;  // aliasing guard for positive psi-order

// Amplitude a(x, y, xi) with orders (m1 in x, m2 in y, m3 in xi).
struct Amplitude {
  Expr ast;
  int dim = 1;
  std::array<int, 3> order{};
  int theta_dim = 0;

  int xi_dim() const { return theta_dim > 0 ? theta_dim : dim; }
};

// ---------------------------------------------------------------------------
// Separated representation a = sum_t f_t(x) g_t(y) h_t(xi), used for fast application.

namespace detail {

struct SepTerm {
  NodePtr fx, fy, fxi;
};

inline std::optional<std::vector<SepTerm>> separate(const NodePtr& n, std::size_t cap,
                                                    std::unordered_map<const Node*, std::optional<std::vector<SepTerm>>>& memo) {
  if (auto it = memo.find(n.get()); it != memo.end()) return it->second;
  const NodePtr one = nodes::cst(1.0);
  std::optional<std::vector<SepTerm>> r;
  unsigned u = uses(Expr(n));
  if (u == 0 || u == 1) {
    r = std::vector<SepTerm>{{n, one, one}};
  } else if (u == 2) {
    r = std::vector<SepTerm>{{one, one, n}};
  } else if (u == 4) {
    r = std::vector<SepTerm>{{one, n, one}};
  } else if (n->op == Op::Add) {
    std::vector<SepTerm> out;
    for (auto& a : n->args) {
      auto s = separate(a, cap, memo);
      if (!s || out.size() + s->size() > cap) {
        out.clear();
        memo.emplace(n.get(), std::nullopt);
        return std::nullopt;
      }
      out.insert(out.end(), s->begin(), s->end());
    }
    r = std::move(out);
  } else if (n->op == Op::Mul) {
    std::vector<SepTerm> out{{one, one, one}};
    bool ok = true;
    for (auto& a : n->args) {
      auto s = separate(a, cap, memo);
      if (!s || out.size() * s->size() > cap) {
        ok = false;
        break;
      }
      std::vector<SepTerm> next;
      for (auto& p : out)
        for (auto& q : *s)
          next.push_back({nodes::mul({p.fx, q.fx}), nodes::mul({p.fy, q.fy}), nodes::mul({p.fxi, q.fxi})});
      out = std::move(next);
    }
    if (ok) r = std::move(out);
  }
  memo.emplace(n.get(), r);
  return r;
}

inline std::optional<std::vector<SepTerm>> separate(const Expr& e, std::size_t cap = 64) {
  std::unordered_map<const Node*, std::optional<std::vector<SepTerm>>> memo;
  return separate(e.node(), cap, memo);
}

inline std::vector<cplx> table_x(const GridSpec& s, const NodePtr& f, Block b) {
  Tape t{Expr(f)};
  std::vector<cplx> v(s.total());
  parallel_for(v.size(), [&](std::size_t j) {
    Point p;
    if (b == Block::x) s.point_x(j, p.x.data());
    if (b == Block::y) s.point_x(j, p.y.data());
    if (b == Block::xi) s.point_xi(j, p.xi.data());
    cplx val = t(p);
    if (!std::isfinite(val.real()) || !std::isfinite(val.imag())) throw DomainError("non-finite value on grid");
    v[j] = val;
  });
  return v;
}

// exp(i x_j xi_k) per axis.
inline std::vector<cplx> phase_table(const GridSpec& s) {
  std::vector<cplx> e(std::size_t(s.N) * s.N);
  for (int j = 0; j < s.N; ++j)
    for (int k = 0; k < s.N; ++k) e[std::size_t(j) * s.N + k] = std::exp(cplx(0, s.x(j) * s.xi(k)));
  return e;
}

inline cplx plane(const GridSpec& s, const std::vector<cplx>& E, std::size_t j, std::size_t k) {
  auto a = s.index(j), b = s.index(k);
  cplx v = E[std::size_t(a[0]) * s.N + b[0]];
  if (s.n == 2) v *= E[std::size_t(a[1]) * s.N + b[1]];
  return v;
}

inline void check_finite_table(const std::vector<cplx>& v) {
  for (auto& c : v)
    if (!std::isfinite(c.real()) || !std::isfinite(c.imag())) throw DomainError("non-finite value on grid");
}

}  // namespace detail

// Op(a)u(x_j) = sum_k exp(i x_j xi_k) a(x_j, xi_k) u_hat(xi_k) (dxi/2pi)^n.
inline GridOperator quantize_expr(const Expr& a, const GridSpec& s) {
  s.validate();
  if (uses(a) & 4u) throw DomainError("symbol depends on y; use quantize_amplitude");
  if (auto sep = detail::separate(a)) {
    // group x-factors by shared xi-factor
    std::map<const Node*, std::pair<NodePtr, std::vector<NodePtr>>> groups;
    for (auto& t : *sep) {
      auto& g = groups[t.fxi.get()];
      g.first = t.fxi;
      g.second.push_back(t.fx);
    }
    struct Part {
      std::vector<cplx> fx, g;
      bool mult_only;
    };
    auto parts = std::make_shared<std::vector<Part>>();
    for (auto& [key, grp] : groups) {
      Part p;
      p.fx = detail::table_x(s, nodes::add(grp.second), Block::x);
      p.mult_only = nodes::is_const(grp.first);
      if (p.mult_only) {
        for (auto& v : p.fx) v *= grp.first->c;
      } else {
        p.g = detail::table_x(s, grp.first, Block::xi);
      }
      parts->push_back(std::move(p));
    }
    return {s, [s, parts](const GridFunction& u) {
              GridFunction out(s);
              std::vector<cplx> uh;
              for (const auto& p : *parts) {
                if (p.mult_only) {
                  for (std::size_t j = 0; j < u.v.size(); ++j) out.v[j] += p.fx[j] * u.v[j];
                  continue;
                }
                if (uh.empty()) uh = forward_transform(u);
                std::vector<cplx> w(uh.size());
                for (std::size_t k = 0; k < w.size(); ++k) w[k] = p.g[k] * uh[k];
                auto iv = inverse_transform(s, std::move(w));
                for (std::size_t j = 0; j < u.v.size(); ++j) out.v[j] += p.fx[j] * iv.v[j];
              }
              return out;
            }};
  }
  // general symbol: direct double sum, symbol table cached when small enough
  const std::size_t M = s.total();
  auto E = std::make_shared<std::vector<cplx>>(detail::phase_table(s));
  auto tape = std::make_shared<Tape>(a);
  auto table = std::make_shared<std::vector<cplx>>();
  if (M * M <= (std::size_t(1) << 22)) {
    table->resize(M * M);
    parallel_for(M, [&](std::size_t j) {
      Point p;
      s.point_x(j, p.x.data());
      for (std::size_t k = 0; k < M; ++k) {
        s.point_xi(k, p.xi.data());
        (*table)[j * M + k] = (*tape)(p);
      }
    });
    detail::check_finite_table(*table);
  }
  return {s, [s, E, tape, table, M](const GridFunction& u) {
            auto uh = forward_transform(u);
            const double w = std::pow(s.dxi() / (2.0 * std::numbers::pi), s.n);
            GridFunction out(s);
            parallel_for(M, [&](std::size_t j) {
              Point p;
              s.point_x(j, p.x.data());
              cplx acc = 0.0;
              for (std::size_t k = 0; k < M; ++k) {
                cplx av;
                if (!table->empty()) {
                  av = (*table)[j * M + k];
                } else {
                  s.point_xi(k, p.xi.data());
                  av = (*tape)(p);
                }
                acc += detail::plane(s, *E, j, k) * av * uh[k];
              }
              out.v[j] = acc * w;
            });
            detail::check_finite_table(out.v);
            return out;
          }};
}

inline GridOperator quantize(const SymbolExpr& a, const GridSpec& s) {
  if (a.order.m_psi >= 1 && s.N < kMinGridForOrder)
    throw GridTooCoarse("positive psi-order needs N >= " + std::to_string(kMinGridForOrder));
  if (a.dim != s.n) throw DomainError("symbol and grid dimensions differ");
  return quantize_expr(a.ast, s);
}

inline GridOperator quantize(const ClassicalSymbol& a, const GridSpec& s) { return quantize(a.base, s); }

// Op(b)u(x) = sum_k sum_l exp(i (x - y_l) xi_k) b(x, y_l, xi_k) u_l dy^n (dxi/2pi)^n.
inline GridOperator quantize_amplitude(const Amplitude& amp, const GridSpec& s) {
  s.validate();
  const unsigned u = uses(amp.ast);
  if (!(u & 4u)) return quantize_expr(amp.ast, s);
  if (auto sep = detail::separate(amp.ast)) {
    struct Part {
      std::vector<cplx> fx, fy, h;
    };
    auto parts = std::make_shared<std::vector<Part>>();
    for (auto& t : *sep)
      parts->push_back({detail::table_x(s, t.fx, Block::x), detail::table_x(s, t.fy, Block::y),
                        detail::table_x(s, t.fxi, Block::xi)});
    return {s, [s, parts](const GridFunction& in) {
              GridFunction out(s);
              for (const auto& p : *parts) {
                GridFunction v(s);
                for (std::size_t l = 0; l < v.v.size(); ++l) v.v[l] = p.fy[l] * in.v[l];
                auto vh = forward_transform(v);
                for (std::size_t k = 0; k < vh.size(); ++k) vh[k] *= p.h[k];
                auto iv = inverse_transform(s, std::move(vh));
                for (std::size_t j = 0; j < iv.v.size(); ++j) out.v[j] += p.fx[j] * iv.v[j];
              }
              return out;
            }};
  }
  const std::size_t M = s.total();
  auto E = std::make_shared<std::vector<cplx>>(detail::phase_table(s));
  auto tape = std::make_shared<Tape>(amp.ast);
  const double w = std::pow(s.dx() * s.dxi() / (2.0 * std::numbers::pi), s.n);
  if (!(u & 1u)) {
    // x-independent: w_k = sum_l exp(-i y_l xi_k) b(y_l, xi_k) u_l, then inverse sum
    auto table = std::make_shared<std::vector<cplx>>(M * M);
    parallel_for(M, [&](std::size_t k) {
      Point p;
      s.point_xi(k, p.xi.data());
      for (std::size_t l = 0; l < M; ++l) {
        s.point_x(l, p.y.data());
        (*table)[k * M + l] = (*tape)(p);
      }
    });
    detail::check_finite_table(*table);
    return {s, [s, E, table, M, w](const GridFunction& in) {
              std::vector<cplx> wk(M);
              parallel_for(M, [&](std::size_t k) {
                cplx acc = 0.0;
                for (std::size_t l = 0; l < M; ++l) acc += std::conj(detail::plane(s, *E, l, k)) * (*table)[k * M + l] * in.v[l];
                wk[k] = acc;
              });
              GridFunction out(s);
              parallel_for(M, [&](std::size_t j) {
                cplx acc = 0.0;
                for (std::size_t k = 0; k < M; ++k) acc += detail::plane(s, *E, j, k) * wk[k];
                out.v[j] = acc * w;
              });
              return out;
            }};
  }
  if (M * M * M > (std::size_t(1) << 28)) throw DomainError("general amplitude too large for direct summation");
  return {s, [s, E, tape, M, w](const GridFunction& in) {
            GridFunction out(s);
            parallel_for(M, [&](std::size_t j) {
              Point p;
              s.point_x(j, p.x.data());
              cplx acc = 0.0;
              for (std::size_t k = 0; k < M; ++k) {
                s.point_xi(k, p.xi.data());
                cplx inner = 0.0;
                for (std::size_t l = 0; l < M; ++l) {
                  s.point_x(l, p.y.data());
                  inner += std::conj(detail::plane(s, *E, l, k)) * (*tape)(p) * in.v[l];
                }
                acc += detail::plane(s, *E, j, k) * inner;
              }
              out.v[j] = acc * w;
            });
            detail::check_finite_table(out.v);
            return out;
          }};
}

// ---------------------------------------------------------------------------
// Formal calculus.

inline cplx minus_i_pow(int k) {
  static const cplx c[4] = {1.0, cplx(0, -1), -1.0, cplx(0, 1)};
  return c[k & 3];
}

// sum_{|alpha| <= K} (-i)^{|alpha|}/alpha! d_xi^alpha a d_x^alpha b
inline SymbolExpr leibniz_expr(const SymbolExpr& a, const SymbolExpr& b, int K) {
  if (K < 0 || K > kMaxTrunc) throw DomainError("truncation outside [0, " + std::to_string(kMaxTrunc) + "]");
  require_same_dim(a, b);
  std::vector<Expr> ts;
  for (const auto& al : multi_indices(a.dim, K)) {
    Expr da = diff_multi(a.ast, Block::xi, al);
    if (da.is_zero()) continue;
    Expr db = diff_multi(b.ast, Block::x, al);
    if (db.is_zero()) continue;
    ts.push_back(Expr(minus_i_pow(abs_index(al)) / factorial_index(al)) * da * db);
  }
  return {sum(ts), a.dim, a.order + b.order, a.theta_dim};
}

inline ClassicalSymbol leibniz_product(const ClassicalSymbol& a, const ClassicalSymbol& b, int K) {
  ClassicalSymbol c{leibniz_expr(a.base, b.base, K), {}, std::min(a.n_trunc, b.n_trunc)};
  auto ia = a.matrix.find({0, 0}), ib = b.matrix.find({0, 0});
  if (ia != a.matrix.end() && ib != b.matrix.end()) {
    auto fa = ia->second.fn, fb = ib->second.fn;
    HomogeneousComponent h;
    h.fn = [fa, fb](const Point& p) { return fa(p) * fb(p); };
    h.degree_e = c.order().m_e;
    h.degree_psi = c.order().m_psi;
    h.valid_region = Region::both;
    if (ia->second.expr && ib->second.expr) h.expr = *ia->second.expr * *ib->second.expr;
    c.matrix.emplace(std::make_pair(0, 0), h);
  }
  return c;
}

// sum_{|alpha| <= K} (-i)^{|alpha|}/alpha! d_x^alpha d_xi^alpha conj(a)
inline ClassicalSymbol formal_adjoint(const ClassicalSymbol& a, int K) {
  if (K < 0 || K > kMaxTrunc) throw DomainError("truncation outside [0, " + std::to_string(kMaxTrunc) + "]");
  Expr ca = conj(a.base.ast);
  std::vector<Expr> ts;
  for (const auto& al : multi_indices(a.dim(), K)) {
    Expr d = diff_multi(diff_multi(ca, Block::x, al), Block::xi, al);
    if (d.is_zero()) continue;
    ts.push_back(Expr(minus_i_pow(abs_index(al)) / factorial_index(al)) * d);
  }
  return ClassicalSymbol{{sum(ts), a.dim(), a.order(), a.base.theta_dim}, {}, a.n_trunc};
}

// Left symbol of an amplitude: sum (-i)^{|alpha|}/alpha! d_xi^alpha d_y^alpha amp at y = x.
inline ClassicalSymbol amplitude_reduce(const Amplitude& amp, int K) {
  if (K < 0 || K > kMaxTrunc) throw DomainError("truncation outside [0, " + std::to_string(kMaxTrunc) + "]");
  std::vector<Expr> ts;
  auto xs = Expr::vars(Block::x, amp.dim);
  for (const auto& al : multi_indices(amp.dim, K)) {
    Expr d = diff_multi(diff_multi(amp.ast, Block::y, al), Block::xi, al);
    if (d.is_zero()) continue;
    ts.push_back(Expr(minus_i_pow(abs_index(al)) / factorial_index(al)) * substitute_blocks(d, {}, {}, xs));
  }
  BiOrder m{amp.order[0] + amp.order[1], amp.order[2]};
  return ClassicalSymbol{{sum(ts), amp.dim, m, amp.theta_dim}, {}, 4};
}

inline ClassicalSymbol order_reduction(BiOrder m, int n = 1) { return lambda_classical(m, n); }

// ---------------------------------------------------------------------------
// Parametrix.

// Triple-inverse glue chi(x)/p_e + chi(xi)/p_psi - chi(x)chi(xi)/p_psie; the plain inverse when all three
// components coincide.
inline SymbolExpr triple_inverse(const PrincipalTriple& t, const ExcisionFunction& chi = {}) {
  if (!t.closed_form()) throw DomainError("parametrix needs closed-form principal parts");
  const Expr &pe = t.a_e.expr->ast, &pp = t.a_psi.expr->ast, &pc = t.a_psie.expr->ast;
  const int n = t.dim;
  if (pe.same(pp) && pp.same(pc)) return make_symbol(inv(pe), n, -t.order);
  Expr cx = chi.on(Block::x, n), cxi = chi.on(Block::xi, n);
  return make_symbol(cx * inv(pe) + cxi * inv(pp) - cx * cxi * inv(pc), n, -t.order);
}

inline ClassicalSymbol parametrix(const ClassicalSymbol& a, int K) {
  if (K < 0 || K > kMaxTrunc) throw DomainError("truncation outside [0, " + std::to_string(kMaxTrunc) + "]");
  auto ell = is_elliptic(a);
  if (!ell.elliptic) throw NotElliptic("margin " + std::to_string(ell.margin));
  auto q0 = triple_inverse(principal_triple(a));
  SymbolExpr q = q0;
  for (int j = 0; j < K; ++j) {
    auto r = leibniz_expr(a.base, q, K);
    q = {q.ast - q0.ast * (r.ast - Expr(1.0)), a.dim(), -a.order(), a.base.theta_dim};
  }
  return ClassicalSymbol{q, {}, a.n_trunc};
}

// a # q - 1 truncated at K.
inline SymbolExpr parametrix_residual(const ClassicalSymbol& a, const ClassicalSymbol& q, int K) {
  auto r = leibniz_expr(a.base, q.base, K);
  return {r.ast - Expr(1.0), a.dim(), BiOrder{}, a.base.theta_dim};
}

// ---------------------------------------------------------------------------
// Symbol recovery: sigma(x, xi) = exp(-i x xi) (P exp(i . xi))(x) at grid points.

struct SymbolSample {
  std::array<double, 2> x{}, xi{};
};

inline int snap(double v, double origin, double step, int N) {
  double t = (v - origin) / step;
  int j = static_cast<int>(std::lround(t));
  if (std::abs(t - j) > 1e-6 || j < 0 || j >= N) throw SampleOutOfRange("sample is not a grid point");
  return j;
}

// Plane waves are periodic on the box, so they are exact for x-independent symbols but ring when P
// multiplies by an unbounded function of x. The windowed probe tapers exp(i x xi) with an erf window
// that is flat on |x_i| <= 3L/4 (width L/20), which makes local and differential compositions
// recoverable on the inner half.
enum class Probe { plane, windowed };

inline double probe_window(const GridSpec& s, const double* p) {
  const double edge = 0.75 * s.L, w = s.L / 20.0;
  double v = 1.0;
  for (int i = 0; i < s.n; ++i) v *= 0.5 * (std::erf((p[i] + edge) / w) - std::erf((p[i] - edge) / w));
  return v;
}

inline std::vector<cplx> recover_symbol(const GridOperator& P, const std::vector<SymbolSample>& samples,
                                        Probe probe = Probe::plane) {
  const auto& s = P.spec;
  struct Key {
    std::size_t flat_x, flat_xi;
  };
  std::vector<Key> keys;
  for (const auto& smp : samples) {
    std::array<int, 2> jx{}, jk{};
    for (int i = 0; i < s.n; ++i) {
      if (std::abs(smp.x[i]) > s.L / 2 + 1e-12 || std::abs(smp.xi[i]) > s.xi_max() / 2 + 1e-12)
        throw SampleOutOfRange("sample outside the inner half of the grid");
      jx[i] = snap(smp.x[i], -s.L, s.dx(), s.N);
      jk[i] = snap(smp.xi[i], -s.N / 2 * s.dxi(), s.dxi(), s.N);
    }
    std::size_t fx = s.n == 1 ? jx[0] : std::size_t(jx[0]) * s.N + jx[1];
    std::size_t fk = s.n == 1 ? jk[0] : std::size_t(jk[0]) * s.N + jk[1];
    keys.push_back({fx, fk});
  }
  std::map<std::size_t, GridFunction> images;
  for (const auto& k : keys) {
    if (images.count(k.flat_xi)) continue;
    double xi[2] = {0, 0};
    s.point_xi(k.flat_xi, xi);
    auto e = GridFunction::sample(s, [&](const double* p) {
      double ph = 0.0;
      for (int i = 0; i < s.n; ++i) ph += p[i] * xi[i];
      return (probe == Probe::windowed ? probe_window(s, p) : 1.0) * std::exp(cplx(0, ph));
    });
    images.emplace(k.flat_xi, P(e));
  }
  std::vector<cplx> out;
  for (const auto& k : keys) {
    double x[2] = {0, 0}, xi[2] = {0, 0};
    s.point_x(k.flat_x, x);
    s.point_xi(k.flat_xi, xi);
    double ph = 0.0;
    for (int i = 0; i < s.n; ++i) ph += x[i] * xi[i];
    out.push_back(std::exp(cplx(0, -ph)) * images.at(k.flat_xi).v[k.flat_x]);
  }
  return out;
}

// Grid points in the inner half: x-radius and xi-radius values snapped to the grid along axis directions.
inline std::vector<SymbolSample> inner_samples(const GridSpec& s, const std::vector<double>& xs,
                                               const std::vector<double>& xis) {
  std::vector<SymbolSample> out;
  auto snapx = [&](double v) { return s.x(static_cast<int>(std::lround((v + s.L) / s.dx()))); };
  auto snapk = [&](double v) { return s.xi(static_cast<int>(std::lround(v / s.dxi())) + s.N / 2); };
  for (double x : xs)
    for (double k : xis) {
      SymbolSample p;
      p.x[0] = snapx(x);
      p.xi[0] = snapk(k);
      out.push_back(p);
    }
  return out;
}

// Dyadic estimate samples restricted to grid points of the inner half: |x| radii 0, 1, 2, 4, ... <= L/2 and
// |xi| radii up to xi_max/2, along the axis directions (and diagonals for n = 2). Snapped radii are kept
// as the sample radii so that the weights match the actual points.
struct GridDyadicSamples {
  std::vector<Sample> samples;
  std::vector<SymbolSample> points;
  std::size_t nshells = 0;
};

inline GridDyadicSamples grid_dyadic_samples(const GridSpec& s) {
  std::vector<double> rx{0.0}, rk{0.0};
  for (double r = 1.0; r <= s.L / 2; r *= 2) rx.push_back(r);
  for (double r = 1.0; r <= s.xi_max() / 2; r *= 2) rk.push_back(r);
  const std::size_t shells = std::min(rx.size(), rk.size());
  rx.resize(shells);
  rk.resize(shells);
  std::vector<std::array<double, 2>> dirs;
  if (s.n == 1) {
    dirs = {{1, 0}, {-1, 0}};
  } else {
    const double h = std::sqrt(0.5);
    dirs = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}, {h, h}, {-h, h}, {-h, -h}, {h, -h}};
  }
  auto snap_to = [](double v, double origin, double step) { return origin + std::round((v - origin) / step) * step; };
  GridDyadicSamples out;
  out.nshells = shells;
  for (std::size_t a = 0; a < shells; ++a)
    for (const auto& dx : dirs)
      for (std::size_t b = 0; b < shells; ++b)
        for (const auto& dk : dirs) {
          SymbolSample p;
          Sample smp;
          double nx = 0, nk = 0;
          for (int i = 0; i < s.n; ++i) {
            p.x[i] = snap_to(rx[a] * dx[i], -s.L, s.dx());
            p.xi[i] = snap_to(rk[b] * dk[i], 0.0, s.dxi());
            smp.p.x[i] = p.x[i];
            smp.p.xi[i] = p.xi[i];
            nx += p.x[i] * p.x[i];
            nk += p.xi[i] * p.xi[i];
          }
          smp.shell = {int(a), int(b), 0};
          smp.radius = {std::sqrt(nx), std::sqrt(nk), 0.0};
          out.points.push_back(p);
          out.samples.push_back(smp);
        }
  return out;
}

// ---------------------------------------------------------------------------
// SG-Sobolev norms.

struct SobolevOrder {
  double m_e = 0.0, m_psi = 0.0;
};

// || <xi>^{m_psi} F(<x>^{m_e} u) ||, normalised so that m = 0 is the discrete L2 norm.
inline double sobolev_norm(const GridFunction& u, SobolevOrder m) {
  const auto& s = u.spec;
  GridFunction w(s);
  double p[2];
  for (std::size_t j = 0; j < w.v.size(); ++j) {
    s.point_x(j, p);
    double r2 = 0;
    for (int i = 0; i < s.n; ++i) r2 += p[i] * p[i];
    w.v[j] = std::pow(1.0 + r2, m.m_e / 2) * u.v[j];
  }
  auto wh = forward_transform(w);
  double acc = 0.0;
  for (std::size_t k = 0; k < wh.size(); ++k) {
    s.point_xi(k, p);
    double r2 = 0;
    for (int i = 0; i < s.n; ++i) r2 += p[i] * p[i];
    acc += std::pow(1.0 + r2, m.m_psi) * std::norm(wh[k]);
  }
  return std::sqrt(acc * std::pow(s.dxi() / (2.0 * std::numbers::pi), s.n));
}

// ---------------------------------------------------------------------------
// Fourier conjugation: F^-1 Op(a) F = Op of the amplitude a(xi, -y); orders swap.

struct ConjugatedSymbol {
  Amplitude amplitude;
  BiOrder order;
};

inline ConjugatedSymbol fourier_conjugate(const SymbolExpr& a) {
  std::vector<Expr> newx, newxi;
  for (int i = 0; i < a.dim; ++i) {
    newx.push_back(Expr::xi(i));
    newxi.push_back(-Expr::y(i));
  }
  Expr b = substitute_blocks(a.ast, newx, newxi);
  return {Amplitude{b, a.dim, {0, a.order.m_psi, a.order.m_e}, 0}, BiOrder{a.order.m_psi, a.order.m_e}};
}

// ---------------------------------------------------------------------------
// Radial-limit decomposition e = c + f on R^{2n} (z = (x, xi)).

struct RadialSplit {
  cplx c;
  double spread = 0.0;
  double decay_exponent = 0.0;
  int gradient_decay_order = 0;  // largest N <= 6 with grad e passing at (-N,-N)
};

inline constexpr int kRadialGradientOrder = 3;

inline RadialSplit radial_limit_decomposition(const SymbolExpr& e, double tol = 1e-8) {
  const int n = e.dim;
  RadialSplit out;
  for (int N = 1; N <= 6; ++N) {
    bool ok = true;
    for (Block b : {Block::x, Block::xi})
      for (int i = 0; i < n && ok; ++i)
        ok = check_sg_estimate(make_symbol(diff(e.ast, b, i), n, {-N, -N}), {-N, -N}, 1).pass;
    if (!ok) break;
    out.gradient_decay_order = N;
  }
  if (out.gradient_decay_order < kRadialGradientOrder)
    throw NotRadiallyConvergent("gradient is not rapidly decreasing (passes only at order -" +
                                std::to_string(out.gradient_decay_order) + ")");
  Tape t(e.ast);
  auto dirs = sphere_directions(2 * n, 2 * n == 2 ? 16 : 32);
  auto at = [&](const std::vector<double>& d, double r) {
    Point p;
    for (int i = 0; i < n; ++i) {
      p.x[i] = r * d[i];
      p.xi[i] = r * d[n + i];
    }
    return t(p);
  };
  std::vector<cplx> limits;
  for (const auto& d : dirs) {
    cplx a = at(d, 512.0), b = at(d, 1024.0);
    if (std::abs(a - b) > tol) throw NotRadiallyConvergent("radial values do not settle");
    limits.push_back(b);
  }
  cplx mean = 0.0;
  for (auto& l : limits) mean += l;
  out.c = mean / double(limits.size());
  for (auto& a : limits)
    for (auto& b : limits) out.spread = std::max(out.spread, std::abs(a - b));
  if (out.spread > tol) throw NotRadiallyConvergent("radial limit depends on direction");
  // decay exponent of f = e - c: log2 ratio of the two outermost dyadic shells where f is resolvable
  Tape f(e.ast - Expr(out.c));
  auto fat = [&](const std::vector<double>& d, double r) {
    Point p;
    for (int i = 0; i < n; ++i) {
      p.x[i] = r * d[i];
      p.xi[i] = r * d[n + i];
    }
    return f(p);
  };
  const double floor = 1e-10 * std::max(1.0, std::abs(out.c));
  std::vector<double> shell;
  for (int k = 0; k <= 8; ++k) {
    double m = 0.0;
    for (const auto& d : dirs) m = std::max(m, std::abs(fat(d, std::ldexp(1.0, k))));
    if (m <= floor) break;
    shell.push_back(m);
  }
  out.decay_exponent = shell.size() < 2 ? std::numeric_limits<double>::infinity()
                                        : std::log2(shell[shell.size() - 2] / shell.back());
  return out;
}

}  // namespace sgcalc
