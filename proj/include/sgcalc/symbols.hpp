#pragma once

// SG symbols: estimate checks, principal parts, classical symbols, Poisson bracket.

#include <climits>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sgcalc/expr.hpp"
#include "sgcalc/parallel.hpp"

namespace sgcalc {

// ---------------------------------------------------------------------------
// Basic symbol builders.

inline Expr jap_x(int n) { return Expr::jap_of(Block::x, n); }
inline Expr jap_xi(int n) { return Expr::jap_of(Block::xi, n); }
inline Expr jap_y(int n) { return Expr::jap_of(Block::y, n); }
inline Expr norm_x(int n) { return Expr::norm_of(Block::x, n); }
inline Expr norm_xi(int n) { return Expr::norm_of(Block::xi, n); }

inline Expr lambda_expr(BiOrder m, int n) { return pow(jap_x(n), m.m_e) * pow(jap_xi(n), m.m_psi); }

inline SymbolExpr lambda_symbol(BiOrder m, int n) { return make_symbol(lambda_expr(m, n), n, m); }

struct ExcisionFunction {
  double r0 = 1.0;
  double r1 = 2.0;

  ExcisionFunction scaled(double c) const { return {c * r0, c * r1}; }
  Expr operator()(const std::vector<Expr>& v) const { return Expr::excision(v, r0, r1); }
  Expr on(Block b, int n) const { return (*this)(Expr::vars(b, n)); }
  Expr on_joint(int n) const {
    auto v = Expr::vars(Block::x, n);
    auto w = Expr::vars(Block::xi, n);
    v.insert(v.end(), w.begin(), w.end());
    return (*this)(v);
  }
  double value(double r) const {
    double jet[1];
    smooth_step_jet((r - r0) / (r1 - r0), 0, jet);
    return jet[0];
  }
};

// ---------------------------------------------------------------------------
// Sampling.

inline std::vector<std::vector<double>> sphere_directions(int n, int count) {
  std::vector<std::vector<double>> d;
  if (n == 1) return {{1.0}, {-1.0}};
  if (n == 2) {
    for (int k = 0; k < count; ++k) {
      double a = 2.0 * std::numbers::pi * k / count;
      d.push_back({std::cos(a), std::sin(a)});
    }
    return d;
  }
  // Fibonacci points on S^{n-1}, lifted from S^2 and padded for n > 3.
  const double ga = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int k = 0; k < count; ++k) {
    double z = 1.0 - 2.0 * (k + 0.5) / count;
    double r = std::sqrt(1.0 - z * z);
    std::vector<double> v(n, 0.0);
    v[0] = r * std::cos(ga * k);
    v[1] = r * std::sin(ga * k);
    v[2] = z;
    d.push_back(v);
  }
  return d;
}

struct DyadicGrid {
  std::vector<double> radii;  // increasing
  int directions = 16;

  static DyadicGrid standard(int k_max = 8, int directions = 16) {
    DyadicGrid g;
    for (int k = 0; k <= k_max; ++k) g.radii.push_back(std::ldexp(1.0, k));
    g.directions = directions;
    return g;
  }
};

struct BlockSpec {
  Block block;
  int size;
  double order;
};

struct Sample {
  Point p;
  std::array<int, 3> shell{};
  std::array<double, 3> radius{};
};

inline std::vector<Sample> product_samples(const std::vector<BlockSpec>& blocks, const DyadicGrid& g) {
  std::vector<Sample> out(1);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto dirs = sphere_directions(blocks[b].size, g.directions);
    std::vector<Sample> next;
    next.reserve(out.size() * dirs.size() * g.radii.size());
    for (const auto& s : out) {
      for (std::size_t k = 0; k < g.radii.size(); ++k) {
        for (const auto& d : dirs) {
          Sample t = s;
          auto& arr = blocks[b].block == Block::x ? t.p.x : blocks[b].block == Block::xi ? t.p.xi : t.p.y;
          for (int i = 0; i < blocks[b].size; ++i) arr[i] = g.radii[k] * d[i];
          t.shell[b] = static_cast<int>(k);
          t.radius[b] = g.radii[k];
          next.push_back(t);
        }
      }
    }
    out = std::move(next);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Estimate checks.

inline constexpr double kRatioCap = 1e3;
inline constexpr double kGrowthLimit = 0.5;  // log2 growth between the two outermost shells

struct EstimateEntry {
  std::vector<std::vector<int>> index;  // derivative multi-index per block
  double worst_ratio = 0.0;
  double reference = 0.0;
  std::vector<double> growth;  // log2 growth per block
  bool pass = true;
};

struct EstimateReport {
  BiOrder order_tested{};
  std::vector<double> orders;  // per block, when more than two blocks
  int max_deriv = 0;
  std::vector<EstimateEntry> entries;
  bool pass = true;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.worst_ratio);
    return w;
  }
};

// Scan samples: ve(sample) -> (value, roundoff bound); we(sample) -> weight.
template <class VE, class WE>
EstimateEntry scan_estimate(const std::vector<Sample>& samples, int nblocks, std::size_t nshells, VE&& ve, WE&& we) {
  EstimateEntry e;
  std::vector<std::vector<double>> shell_max(nblocks, std::vector<double>(nshells, 0.0));
  for (const auto& s : samples) {
    auto [v, err] = ve(s);
    double ratio;
    if (!std::isfinite(v.real()) || !std::isfinite(v.imag()) || !std::isfinite(err)) {
      ratio = std::numeric_limits<double>::infinity();
    } else {
      ratio = std::max(std::abs(v) - err, 0.0) / we(s);
    }
    e.worst_ratio = std::max(e.worst_ratio, ratio);
    bool inner = true;
    for (int b = 0; b < nblocks; ++b) {
      shell_max[b][s.shell[b]] = std::max(shell_max[b][s.shell[b]], ratio);
      if (s.shell[b] > 1) inner = false;
    }
    if (inner) e.reference = std::max(e.reference, ratio);
  }
  e.growth.assign(nblocks, 0.0);
  if (!std::isfinite(e.worst_ratio)) {
    e.pass = false;
    return e;
  }
  e.pass = e.worst_ratio <= kRatioCap * std::max(e.reference, 1.0);
  if (nshells >= 2) {
    for (int b = 0; b < nblocks; ++b) {
      double top = shell_max[b][nshells - 1], prev = shell_max[b][nshells - 2];
      if (prev >= 1e-3 * e.worst_ratio && prev > 0.0) {
        e.growth[b] = std::log2(std::max(top, 1e-300) / prev);
        if (e.growth[b] > kGrowthLimit) e.pass = false;
      }
    }
  }
  return e;
}

inline double jap_r(double r) { return std::sqrt(1.0 + r * r); }

// Generic estimate over blocks: |d^gamma s| <= prod <v_b>^{order_b - |gamma_b|}.
inline EstimateReport check_estimate_blocks(const Expr& s, const std::vector<BlockSpec>& blocks, int max_deriv,
                                            const DyadicGrid& grid) {
  EstimateReport rep;
  rep.max_deriv = max_deriv;
  for (auto& b : blocks) rep.orders.push_back(b.order);
  int total = 0;
  for (auto& b : blocks) total += b.size;
  auto samples = product_samples(blocks, grid);
  auto gammas = multi_indices(total, max_deriv);
  // derivatives built incrementally: d^gamma = d_i d^{gamma - e_i}
  std::vector<std::pair<Block, int>> var;
  for (auto& b : blocks)
    for (int i = 0; i < b.size; ++i) var.emplace_back(b.block, i);
  std::map<std::vector<int>, Expr> der;
  std::vector<Expr> roots;
  for (const auto& g : gammas) {
    if (abs_index(g) == 0) {
      der.emplace(g, s);
    } else {
      std::size_t i = 0;
      while (g[i] == 0) ++i;
      auto h = g;
      --h[i];
      der.emplace(g, diff(der.at(h), var[i].first, var[i].second));
    }
    roots.push_back(der.at(g));
  }
  Tape t(roots);
  const std::size_t R = roots.size();
  std::vector<cplx> vals(samples.size() * R);
  std::vector<double> errs(samples.size() * R);
  parallel_for(samples.size(), [&](std::size_t k) { t.eval_bounded_all(samples[k].p, &vals[k * R], &errs[k * R]); });
  for (std::size_t r = 0; r < R; ++r) {
    const auto& g = gammas[r];
    std::vector<std::vector<int>> idx;
    std::vector<int> absb;
    int off = 0;
    for (auto& b : blocks) {
      std::vector<int> part(g.begin() + off, g.begin() + off + b.size);
      absb.push_back(abs_index(part));
      idx.push_back(part);
      off += b.size;
    }
    std::size_t k = 0;
    auto entry = scan_estimate(
        samples, static_cast<int>(blocks.size()), grid.radii.size(),
        [&](const Sample&) {
          std::pair<cplx, double> ve{vals[k * R + r], errs[k * R + r]};
          ++k;
          return ve;
        },
        [&](const Sample& smp) {
          double w = 1.0;
          for (std::size_t b = 0; b < blocks.size(); ++b) w *= std::pow(jap_r(smp.radius[b]), blocks[b].order - absb[b]);
          return w;
        });
    entry.index = std::move(idx);
    rep.pass = rep.pass && entry.pass;
    rep.entries.push_back(std::move(entry));
  }
  return rep;
}

inline int default_max_deriv(int n) { return n == 1 ? 4 : 2; }

inline EstimateReport check_sg_estimate(const SymbolExpr& s, BiOrder order, int max_deriv = -1,
                                        std::optional<DyadicGrid> grid = std::nullopt) {
  if (max_deriv < 0) max_deriv = default_max_deriv(s.dim);
  DyadicGrid g = grid ? *grid : DyadicGrid::standard();
  auto rep = check_estimate_blocks(
      s.ast, {{Block::x, s.dim, double(order.m_e)}, {Block::xi, s.xi_dim(), double(order.m_psi)}}, max_deriv, g);
  rep.order_tested = order;
  return rep;
}

// Estimate from sampled values only (no derivatives), e.g. recovered grid symbols.
inline EstimateReport check_sampled_estimate(const std::vector<Sample>& samples, const std::vector<cplx>& values,
                                             BiOrder order, std::size_t nshells) {
  EstimateReport rep;
  rep.order_tested = order;
  std::size_t i = 0;
  std::vector<std::pair<cplx, double>> ve;
  for (auto& v : values) ve.emplace_back(v, 0.0);
  auto entry = scan_estimate(
      samples, 2, nshells, [&](const Sample&) { return ve[i++]; },
      [&](const Sample& s) { return std::pow(jap_r(s.radius[0]), order.m_e) * std::pow(jap_r(s.radius[1]), order.m_psi); });
  entry.index = {{0}, {0}};
  rep.pass = entry.pass;
  rep.entries.push_back(entry);
  return rep;
}

// ---------------------------------------------------------------------------
// Principal parts by scaling limits.

enum class Face { e, psi, psie };

inline const char* face_name(Face f) { return f == Face::e ? "e" : f == Face::psi ? "psi" : "psie"; }

inline Point scale_point(const Point& p, Face f, double mu) {
  Point q = p;
  if (f != Face::psi)
    for (int i = 0; i < kMaxVars; ++i) {
      q.x[i] *= mu;
      q.y[i] *= mu;
    }
  if (f != Face::e)
    for (int i = 0; i < kMaxVars; ++i) q.xi[i] *= mu;
  return q;
}

inline int face_degree(Face f, BiOrder d) {
  return f == Face::e ? d.m_e : f == Face::psi ? d.m_psi : d.m_e + d.m_psi;
}

// lim f(2^k) over k = kmin..kmax with Richardson extrapolation in powers of 2^-k.
inline cplx richardson_limit(const std::function<cplx(double)>& f, int kmin = 4, int kmax = 12) {
  const int M = kmax - kmin + 1;
  std::vector<std::vector<cplx>> T(M, std::vector<cplx>(M));
  for (int j = 0; j < M; ++j) {
    T[j][0] = f(std::ldexp(1.0, kmin + j));
    if (!std::isfinite(T[j][0].real()) || !std::isfinite(T[j][0].imag()))
      throw NonConvergent("non-finite value along scaling sequence");
  }
  for (int j = 1; j < M; ++j)
    for (int l = 1; l <= j; ++l) T[j][l] = T[j][l - 1] + (T[j][l - 1] - T[j - 1][l - 1]) / (std::ldexp(1.0, l) - 1.0);
  double scale = 1.0;
  for (int j = 0; j < M; ++j) scale = std::max(scale, std::abs(T[j][0]));
  const double floor = 1e-11 * scale;
  double prev = std::numeric_limits<double>::infinity();
  int growth = 0;
  for (int l = 1; l < M; ++l) {
    double delta = std::abs(T[l][l] - T[l - 1][l - 1]);
    if (delta <= floor) return T[l][l];
    // competing terms of opposite sign (or a shift a/t before the tail is asymptotic) can make a single
    // difference grow; two growth steps in a row is divergence
    growth = l > 2 && delta > prev ? growth + 1 : 0;
    if (growth >= 2) throw NonConvergent("extrapolant differences do not contract");
    prev = delta;
  }
  if (prev > 1e-6 * scale) throw NonConvergent("extrapolants did not settle");
  return T[M - 1][M - 1];
}

enum class Region { everywhere, x_ge1, xi_ge1, both };

struct HomogeneousComponent {
  std::optional<SymbolExpr> expr;  // closed form when known
  std::function<cplx(const Point&)> fn;
  std::optional<int> degree_e, degree_psi;
  Region valid_region = Region::everywhere;

  cplx operator()(const Point& p) const { return fn(p); }

  static HomogeneousComponent closed(const SymbolExpr& e, std::optional<int> de, std::optional<int> dp,
                                     Region region) {
    HomogeneousComponent h;
    h.expr = e;
    auto tape = std::make_shared<Tape>(e.ast);
    h.fn = [tape](const Point& p) {
      cplx v = (*tape)(p);
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw DomainError("non-finite component value");
      return v;
    };
    h.degree_e = de;
    h.degree_psi = dp;
    h.valid_region = region;
    return h;
  }
};

inline Region face_region(Face f) { return f == Face::e ? Region::x_ge1 : f == Face::psi ? Region::xi_ge1 : Region::both; }

inline HomogeneousComponent principal_limit(const SymbolExpr& s, Face face, BiOrder degree) {
  HomogeneousComponent h;
  auto tape = std::make_shared<Tape>(s.ast);
  const int deg = face_degree(face, degree);
  h.fn = [tape, face, deg](const Point& p) {
    return richardson_limit([&](double mu) { return (*tape)(scale_point(p, face, mu)) * std::pow(mu, -deg); });
  };
  if (face != Face::psi) h.degree_e = degree.m_e;
  if (face != Face::e) h.degree_psi = degree.m_psi;
  h.valid_region = face_region(face);
  return h;
}

inline HomogeneousComponent principal_limit(const SymbolExpr& s, Face face) { return principal_limit(s, face, s.order); }

// Numerical homogeneity test on rays: h(mu * p) = mu^d h(p) for mu in {2,4,8}.
inline double homogeneity_defect(const HomogeneousComponent& h, Face face, int degree, const std::vector<Point>& pts) {
  double worst = 0.0;
  for (const auto& p : pts) {
    cplx base = h(p);
    for (double mu : {2.0, 4.0, 8.0}) {
      cplx v = h(scale_point(p, face, mu));
      worst = std::max(worst, std::abs(v - std::pow(mu, degree) * base) / std::max(1.0, std::abs(v)));
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Symbolic leading parts (closed-form principal components).

namespace detail {

struct Lead {
  bool ok = true;
  int deg = INT_MIN;  // INT_MIN marks the zero function
  NodePtr lead;
};

inline bool scaled(Face f, Block b) { return f == Face::e ? (b == Block::x || b == Block::y) : b == Block::xi; }

inline Lead lead_rec(const NodePtr& n, Face f, std::unordered_map<const Node*, Lead>& memo) {
  if (auto it = memo.find(n.get()); it != memo.end()) return it->second;
  using namespace nodes;
  Lead r;
  auto zero = [] { return Lead{true, INT_MIN, cst(0.0)}; };
  auto fail = [] { return Lead{false, 0, nullptr}; };
  switch (n->op) {
    case Op::Const: r = is_zero(n) ? zero() : Lead{true, 0, n}; break;
    case Op::Coord: r = Lead{true, scaled(f, n->block) ? 1 : 0, n}; break;
    case Op::Add: {
      std::vector<Lead> ls;
      int D = INT_MIN;
      for (auto& a : n->args) {
        Lead l = lead_rec(a, f, memo);
        if (!l.ok) {
          r = fail();
          goto done;
        }
        ls.push_back(l);
        D = std::max(D, l.deg);
      }
      if (D == INT_MIN) {
        r = zero();
        break;
      }
      std::vector<NodePtr> ts;
      for (auto& l : ls)
        if (l.deg == D) ts.push_back(l.lead);
      NodePtr s = add(ts);
      r = is_zero(s) ? fail() : Lead{true, D, s};
      break;
    }
    case Op::Mul: {
      int D = 0;
      std::vector<NodePtr> fs;
      for (auto& a : n->args) {
        Lead l = lead_rec(a, f, memo);
        if (!l.ok) {
          r = fail();
          goto done;
        }
        if (l.deg == INT_MIN) {
          r = zero();
          goto done;
        }
        D += l.deg;
        fs.push_back(l.lead);
      }
      r = Lead{true, D, mul(fs)};
      break;
    }
    case Op::Pow: {
      Lead l = lead_rec(n->args.front(), f, memo);
      if (!l.ok || (l.deg == INT_MIN && n->k < 0)) {
        r = fail();
      } else if (l.deg == INT_MIN) {
        r = zero();
      } else {
        r = Lead{true, l.deg * n->k, pow(l.lead, n->k)};
      }
      break;
    }
    case Op::Exp: {
      Lead l = lead_rec(n->args.front(), f, memo);
      if (!l.ok || l.deg > 0)
        r = fail();
      else if (l.deg < 0)
        r = Lead{true, 0, cst(1.0)};
      else
        r = Lead{true, 0, exp(l.lead)};
      break;
    }
    case Op::Jap:
    case Op::Norm:
    case Op::Excision: {
      std::vector<Lead> ls;
      int D = INT_MIN;
      for (auto& a : n->args) {
        Lead l = lead_rec(a, f, memo);
        if (!l.ok) {
          r = fail();
          goto done;
        }
        ls.push_back(l);
        D = std::max(D, l.deg);
      }
      std::vector<NodePtr> v;
      for (auto& l : ls) v.push_back(l.deg == D ? l.lead : cst(0.0));
      if (n->op == Op::Norm) {
        r = D == INT_MIN ? zero() : Lead{true, D, norm(v)};
      } else if (n->op == Op::Jap) {
        if (D > 0)
          r = Lead{true, D, norm(v)};
        else if (D == 0)
          r = Lead{true, 0, jap(v)};
        else
          r = Lead{true, 0, cst(1.0)};
      } else {
        if (D > 0)
          r = n->k == 0 ? Lead{true, 0, cst(1.0)} : zero();
        else if (D == 0)
          r = Lead{true, 0, excision(v, n->r0, n->r1, n->k)};
        else
          r = zero();
      }
      break;
    }
  }
done:
  memo.emplace(n.get(), r);
  return r;
}

}  // namespace detail

// Leading homogeneous term under the face scaling: (degree, expression), or nullopt on cancellation.
inline std::optional<std::pair<int, Expr>> leading_part(const Expr& e, Face f) {
  if (f == Face::psie) {
    auto a = leading_part(e, Face::e);
    if (!a) return std::nullopt;
    auto b = leading_part(a->second, Face::psi);
    if (!b) return std::nullopt;
    if (a->first == INT_MIN || b->first == INT_MIN) return std::make_pair(INT_MIN, Expr(0.0));
    return std::make_pair(a->first + b->first, b->second);
  }
  std::unordered_map<const Node*, detail::Lead> memo;
  auto l = detail::lead_rec(e.node(), f, memo);
  if (!l.ok) return std::nullopt;
  return std::make_pair(l.deg, Expr(l.lead));
}

// Closed-form principal part at the given degree, or nullopt when the leading terms cancel.
inline std::optional<SymbolExpr> principal_part(const SymbolExpr& s, Face f, BiOrder degree) {
  if (f == Face::psie) {
    auto a = principal_part(s, Face::e, degree);
    if (!a) return std::nullopt;
    return principal_part(*a, Face::psi, degree);
  }
  auto l = leading_part(s.ast, f);
  if (!l) return std::nullopt;
  const int want = face_degree(f, degree);
  SymbolExpr out = s;
  out.order = degree;
  if (l->first == INT_MIN || l->first < want) {
    out.ast = Expr(0.0);
    return out;
  }
  if (l->first > want)
    throw DegreeOrderViolation(std::string("leading degree exceeds declared order on face ") + face_name(f));
  out.ast = l->second;
  return out;
}

inline HomogeneousComponent principal_component(const SymbolExpr& s, Face f, BiOrder degree) {
  if (auto p = principal_part(s, f, degree)) {
    std::optional<int> de, dp;
    if (f != Face::psi) de = degree.m_e;
    if (f != Face::e) dp = degree.m_psi;
    return HomogeneousComponent::closed(*p, de, dp, face_region(f));
  }
  return principal_limit(s, f, degree);
}

// ---------------------------------------------------------------------------
// Classical symbols and principal triples.

struct PrincipalTriple {
  HomogeneousComponent a_e, a_psi, a_psie;
  BiOrder order{};
  int dim = 1;

  bool closed_form() const { return a_e.expr && a_psi.expr && a_psie.expr; }
};

struct ClassicalSymbol {
  SymbolExpr base;
  std::map<std::pair<int, int>, HomogeneousComponent> matrix;  // (j,k): degrees (m_e - k, m_psi - j)
  int n_trunc = 4;

  BiOrder order() const { return base.order; }
  int dim() const { return base.dim; }
};

inline ClassicalSymbol classical(const SymbolExpr& s, int n_trunc = 4) { return ClassicalSymbol{s, {}, n_trunc}; }

inline PrincipalTriple principal_triple(const ClassicalSymbol& c) {
  return PrincipalTriple{principal_component(c.base, Face::e, c.order()),
                         principal_component(c.base, Face::psi, c.order()),
                         principal_component(c.base, Face::psie, c.order()), c.order(), c.dim()};
}

// Sample sets on the normalised face domains.
inline std::vector<Point> face_samples(Face f, int n, int directions = 16) {
  auto dirs = sphere_directions(n, n == 1 ? 2 : std::min(directions, 8));
  const std::vector<double> radii = {0.0, 0.5, 1.0, 2.0, 5.0};
  std::vector<Point> pts;
  for (const auto& a : dirs) {
    for (const auto& b : dirs) {
      for (double r : radii) {
        Point p;
        for (int i = 0; i < n; ++i) {
          if (f == Face::e) {
            p.x[i] = a[i];
            p.xi[i] = r * b[i];
          } else if (f == Face::psi) {
            p.x[i] = r * a[i];
            p.xi[i] = b[i];
          } else {
            p.x[i] = a[i];
            p.xi[i] = b[i];
          }
        }
        pts.push_back(p);
        if (f == Face::psie) break;
      }
    }
  }
  return pts;
}

// Corner compatibility of a triple: sup |sigma_psi(a_e) - a_psie| and |sigma_e(a_psi) - a_psie| on corner samples.
inline double triple_compatibility(const PrincipalTriple& t) {
  double worst = 0.0;
  for (const auto& p : face_samples(Face::psie, t.dim)) {
    cplx c = t.a_psie(p);
    cplx from_e = richardson_limit([&](double mu) { return t.a_e(scale_point(p, Face::psi, mu)) * std::pow(mu, -t.order.m_psi); });
    cplx from_psi = richardson_limit([&](double mu) { return t.a_psi(scale_point(p, Face::e, mu)) * std::pow(mu, -t.order.m_e); });
    worst = std::max({worst, std::abs(from_e - c), std::abs(from_psi - c)});
  }
  return worst;
}

inline ClassicalSymbol associated_symbol(const PrincipalTriple& t, const ExcisionFunction& chi = {}) {
  if (!t.closed_form()) throw DomainError("associated_symbol needs closed-form triple components");
  double res = triple_compatibility(t);
  if (res > 1e-6) throw IncompatibleTriple("corner residual " + std::to_string(res));
  const int n = t.dim;
  Expr cx = chi.on(Block::x, n), cxi = chi.on(Block::xi, n);
  Expr p = cxi * t.a_psi.expr->ast + cx * t.a_e.expr->ast - cx * cxi * t.a_psie.expr->ast;
  ClassicalSymbol c{make_symbol(p, n, t.order), {}, 4};
  c.matrix.emplace(std::make_pair(0, 0), t.a_psie);
  return c;
}

// ---------------------------------------------------------------------------
// Asymptotic sums.

enum class Direction { psi, e };

struct AsymptoticSum {
  SymbolExpr symbol;
  std::vector<double> scales;
};

inline AsymptoticSum asymptotic_sum(const std::vector<HomogeneousComponent>& terms, const ExcisionFunction& chi,
                                    Direction dir, int n) {
  AsymptoticSum out;
  out.symbol = make_symbol(Expr(0.0), n, {});
  if (terms.empty()) return out;
  auto deg = [&](const HomogeneousComponent& h) {
    auto d = dir == Direction::psi ? h.degree_psi : h.degree_e;
    if (!d) throw DegreeOrderViolation("term lacks a degree in the scheduled direction");
    return *d;
  };
  for (std::size_t j = 1; j < terms.size(); ++j)
    if (deg(terms[j]) >= deg(terms[j - 1])) throw DegreeOrderViolation("degrees must strictly decrease");
  const Block b = dir == Direction::psi ? Block::xi : Block::x;
  int other = 0;
  for (auto& t : terms) {
    if (!t.expr) throw DomainError("asymptotic_sum needs closed-form terms");
    auto od = dir == Direction::psi ? t.degree_e : t.degree_psi;
    other = std::max(other, od.value_or(0));
  }
  Expr total(0.0);
  for (std::size_t j = 0; j < terms.size(); ++j) {
    double c = 1.0;
    Expr term = chi.scaled(c).on(b, n) * terms[j].expr->ast;
    if (j > 0) {
      BiOrder ord = dir == Direction::psi ? BiOrder{other, deg(terms[j - 1])} : BiOrder{deg(terms[j - 1]), other};
      const double target = std::ldexp(1.0, -static_cast<int>(j));
      for (int it = 0; it < 40; ++it) {
        term = chi.scaled(c).on(b, n) * terms[j].expr->ast;
        auto rep = check_sg_estimate(make_symbol(term, n, ord), ord, 1);
        if (rep.worst() <= target) break;
        c *= 2.0;
      }
    }
    out.scales.push_back(c);
    total += term;
  }
  BiOrder ord = dir == Direction::psi ? BiOrder{other, deg(terms[0])} : BiOrder{deg(terms[0]), other};
  out.symbol = make_symbol(total, n, ord);
  return out;
}

// ---------------------------------------------------------------------------
// Poisson bracket, weights, ellipticity.

inline SymbolExpr poisson_bracket(const SymbolExpr& a, const SymbolExpr& b) {
  require_same_dim(a, b);
  std::vector<Expr> ts;
  for (int i = 0; i < a.dim; ++i) {
    ts.push_back(diff(a.ast, Block::xi, i) * diff(b.ast, Block::x, i));
    ts.push_back(-(diff(a.ast, Block::x, i) * diff(b.ast, Block::xi, i)));
  }
  return {sum(ts), a.dim, a.order + b.order - BiOrder::diag(1), a.theta_dim};
}

inline SymbolExpr weight_multiply(const SymbolExpr& s, BiOrder p) {
  return {s.ast * lambda_expr(p, s.dim), s.dim, s.order + p, s.theta_dim};
}

struct FaceResiduals {
  double e = 0.0, psi = 0.0, psie = 0.0;
  double max() const { return std::max({e, psi, psie}); }
  double& at(Face f) { return f == Face::e ? e : f == Face::psi ? psi : psie; }
};

// sigma_f({a,b}) (scaling limit of the bracket) against {sigma_f(a), sigma_f(b)} (bracket of closed-form parts,
// or of limits of derivatives when no closed form exists).
inline FaceResiduals bracket_principal_check(const ClassicalSymbol& a, const ClassicalSymbol& b) {
  FaceResiduals r;
  const int n = a.dim();
  auto br = poisson_bracket(a.base, b.base);
  for (Face f : {Face::e, Face::psi, Face::psie}) {
    auto lhs = principal_limit(br, f, br.order);
    auto pa = principal_part(a.base, f, a.order());
    auto pb = principal_part(b.base, f, b.order());
    std::function<cplx(const Point&)> rhs;
    if (pa && pb) {
      auto t = std::make_shared<Tape>(poisson_bracket(*pa, *pb).ast);
      rhs = [t](const Point& p) { return (*t)(p); };
    } else {
      std::vector<std::pair<HomogeneousComponent, HomogeneousComponent>> pairs;
      for (int i = 0; i < n; ++i) {
        std::vector<int> e(n, 0);
        e[i] = 1;
        std::vector<int> z(n, 0);
        auto dxa = differentiate(a.base, e, z), dxia = differentiate(a.base, z, e);
        auto dxb = differentiate(b.base, e, z), dxib = differentiate(b.base, z, e);
        pairs.emplace_back(principal_limit(dxia, f), principal_limit(dxb, f));
        pairs.emplace_back(principal_limit(dxa, f), principal_limit(dxib, f));
      }
      rhs = [pairs](const Point& p) {
        cplx s = 0.0;
        for (std::size_t k = 0; k < pairs.size(); ++k) {
          cplx v = pairs[k].first(p) * pairs[k].second(p);
          s += (k % 2 == 0) ? v : -v;
        }
        return s;
      };
    }
    for (const auto& p : face_samples(f, n)) r.at(f) = std::max(r.at(f), std::abs(lhs(p) - rhs(p)));
  }
  return r;
}

// sigma_f(a b) - sigma_f(a) sigma_f(b) by scaling limits.
inline FaceResiduals principal_multiplicativity(const ClassicalSymbol& a, const ClassicalSymbol& b) {
  FaceResiduals r;
  auto ab = a.base * b.base;
  for (Face f : {Face::e, Face::psi, Face::psie}) {
    auto lab = principal_limit(ab, f), la = principal_limit(a.base, f), lb = principal_limit(b.base, f);
    for (const auto& p : face_samples(f, a.dim())) r.at(f) = std::max(r.at(f), std::abs(lab(p) - la(p) * lb(p)));
  }
  return r;
}

struct EllipticityReport {
  bool elliptic = false;
  double margin = 0.0;
};

inline constexpr double kEllipticThreshold = 1e-3;

inline EllipticityReport is_elliptic(const ClassicalSymbol& c, double threshold = kEllipticThreshold) {
  const int n = c.dim();
  const BiOrder m = c.order();
  auto t = principal_triple(c);
  double margin = std::numeric_limits<double>::infinity();
  auto dirs = sphere_directions(n, 16);
  std::vector<double> radii = {0.0};
  for (int k = -1; k <= 8; ++k) radii.push_back(std::ldexp(1.0, k));
  for (const auto& a : dirs) {
    for (const auto& b : dirs) {
      for (double r : radii) {
        Point pe, pp;
        for (int i = 0; i < n; ++i) {
          pe.x[i] = a[i];
          pe.xi[i] = r * b[i];
          pp.x[i] = r * a[i];
          pp.xi[i] = b[i];
        }
        margin = std::min(margin, std::abs(t.a_e(pe)) / std::pow(jap_r(r), m.m_psi));
        margin = std::min(margin, std::abs(t.a_psi(pp)) / std::pow(jap_r(r), m.m_e));
      }
      Point pc;
      for (int i = 0; i < n; ++i) {
        pc.x[i] = a[i];
        pc.xi[i] = b[i];
      }
      margin = std::min(margin, std::abs(t.a_psie(pc)));
    }
  }
  return {margin > threshold, margin};
}

// Corner-region remainder of the asymptotic matrix:
// |base - sum_{j+k<L} a_jk| <= C lambda^m (<x>^-1 + <xi>^-1)^L on |x|,|xi| >= 2.
inline EstimateEntry matrix_remainder_check(const ClassicalSymbol& c, int L) {
  const int n = c.dim();
  const BiOrder m = c.order();
  std::vector<Tape> parts{Tape(c.base.ast)};
  std::vector<std::function<cplx(const Point&)>> entries;
  for (const auto& [jk, h] : c.matrix)
    if (jk.first + jk.second < L) entries.push_back(h.fn);
  DyadicGrid g;
  for (int k = 1; k <= 8; ++k) g.radii.push_back(std::ldexp(1.0, k));
  g.directions = 16;
  auto samples = product_samples({{Block::x, n, 0.0}, {Block::xi, n, 0.0}}, g);
  return scan_estimate(
      samples, 2, g.radii.size(),
      [&](const Sample& s) {
        auto [v, err] = parts[0].eval_bounded(s.p);
        double mag = std::abs(v);
        for (auto& e : entries) {
          cplx w = e(s.p);
          v -= w;
          mag += std::abs(w);
        }
        return std::make_pair(v, err + 16.0 * std::numeric_limits<double>::epsilon() * mag);
      },
      [&](const Sample& s) {
        double jx = jap_r(s.radius[0]), jxi = jap_r(s.radius[1]);
        return std::pow(jx, m.m_e) * std::pow(jxi, m.m_psi) * std::pow(1.0 / jx + 1.0 / jxi, L);
      });
}

inline double binomial_real(double a, int k) {
  double r = 1.0;
  for (int i = 0; i < k; ++i) r *= (a - i) / (i + 1);
  return r;
}

// lambda^m with its asymptotic matrix: <v>^p = sum_l binom(p/2, l) |v|^{p-2l}.
inline ClassicalSymbol lambda_classical(BiOrder m, int n, int n_trunc = 4) {
  ClassicalSymbol c{lambda_symbol(m, n), {}, n_trunc};
  for (int j = 0; j <= n_trunc; j += 2) {
    for (int k = 0; k <= n_trunc; k += 2) {
      double coef = binomial_real(m.m_e / 2.0, k / 2) * binomial_real(m.m_psi / 2.0, j / 2);
      Expr e = Expr(coef) * pow(norm_x(n), m.m_e - k) * pow(norm_xi(n), m.m_psi - j);
      c.matrix.emplace(std::make_pair(j, k),
                       HomogeneousComponent::closed(make_symbol(e, n, {m.m_e - k, m.m_psi - j}), m.m_e - k,
                                                    m.m_psi - j, Region::both));
    }
  }
  return c;
}

}  // namespace sgcalc
