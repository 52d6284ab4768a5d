#pragma once

// Expression DAG over the variable blocks x, xi (or theta) and y.
// Nodes are hash-consed: structurally equal nodes share one pointer.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sgcalc/errors.hpp"

namespace sgcalc {

using cplx = std::complex<double>;

inline constexpr int kMaxVars = 8;

struct BiOrder {
  int m_e = 0;
  int m_psi = 0;

  friend BiOrder operator+(BiOrder a, BiOrder b) { return {a.m_e + b.m_e, a.m_psi + b.m_psi}; }
  friend BiOrder operator-(BiOrder a, BiOrder b) { return {a.m_e - b.m_e, a.m_psi - b.m_psi}; }
  friend BiOrder operator-(BiOrder a) { return {-a.m_e, -a.m_psi}; }
  friend bool operator==(BiOrder a, BiOrder b) = default;
  // componentwise partial order
  friend bool operator<=(BiOrder a, BiOrder b) { return a.m_e <= b.m_e && a.m_psi <= b.m_psi; }
  static BiOrder diag(int k) { return {k, k}; }
  static BiOrder max(BiOrder a, BiOrder b) { return {std::max(a.m_e, b.m_e), std::max(a.m_psi, b.m_psi)}; }
};

enum class Block : std::uint8_t { x = 0, xi = 1, y = 2 };

enum class Op : std::uint8_t { Const, Coord, Add, Mul, Pow, Exp, Jap, Norm, Excision };

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  Op op = Op::Const;
  Block block = Block::x;
  int k = 0;  // Coord index, Pow exponent, Excision derivative order
  double r0 = 0.0, r1 = 0.0;
  cplx c{};
  std::vector<NodePtr> args;
  std::uint64_t hash = 0;
};

// Evaluation point. Unused trailing entries are ignored.
struct Point {
  std::array<double, kMaxVars> x{}, xi{}, y{};
};

namespace detail {

inline std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  v += 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  v ^= v >> 30;
  v *= 0xbf58476d1ce4e5b9ULL;
  v ^= v >> 27;
  v *= 0x94d049bb133111ebULL;
  v ^= v >> 31;
  return h ^ v;
}

inline std::uint64_t bits(double d) {
  if (d == 0.0) d = 0.0;  // fold -0
  std::uint64_t u;
  std::memcpy(&u, &d, sizeof u);
  return u;
}

inline std::uint64_t node_hash(const Node& n) {
  std::uint64_t h = mix(0x1234567ULL, static_cast<std::uint64_t>(n.op));
  h = mix(h, static_cast<std::uint64_t>(n.block));
  h = mix(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(n.k)));
  h = mix(h, bits(n.r0));
  h = mix(h, bits(n.r1));
  h = mix(h, bits(n.c.real()));
  h = mix(h, bits(n.c.imag()));
  for (const auto& a : n.args) h = mix(h, a->hash);
  return h;
}

inline bool shallow_equal(const Node& a, const Node& b) {
  if (a.hash != b.hash || a.op != b.op || a.block != b.block || a.k != b.k) return false;
  if (bits(a.r0) != bits(b.r0) || bits(a.r1) != bits(b.r1)) return false;
  if (bits(a.c.real()) != bits(b.c.real()) || bits(a.c.imag()) != bits(b.c.imag())) return false;
  if (a.args.size() != b.args.size()) return false;
  for (std::size_t i = 0; i < a.args.size(); ++i)
    if (a.args[i] != b.args[i]) return false;
  return true;
}

class InternTable {
 public:
  NodePtr intern(Node n) {
    n.hash = node_hash(n);
    std::lock_guard<std::mutex> lock(mu_);
    auto& bucket = table_[n.hash];
    for (auto it = bucket.begin(); it != bucket.end();) {
      if (auto sp = it->lock()) {
        if (shallow_equal(*sp, n)) return sp;
        ++it;
      } else {
        it = bucket.erase(it);
      }
    }
    auto sp = std::make_shared<const Node>(std::move(n));
    bucket.push_back(sp);
    if (++inserts_ % (1u << 18) == 0) sweep();
    return sp;
  }

 private:
  void sweep() {
    for (auto it = table_.begin(); it != table_.end();) {
      auto& b = it->second;
      b.erase(std::remove_if(b.begin(), b.end(), [](const auto& w) { return w.expired(); }), b.end());
      it = b.empty() ? table_.erase(it) : std::next(it);
    }
  }
  std::mutex mu_;
  std::unordered_map<std::uint64_t, std::vector<std::weak_ptr<const Node>>> table_;
  std::uint64_t inserts_ = 0;
};

inline InternTable& intern_table() {
  static InternTable t;
  return t;
}

inline NodePtr intern(Node n) { return intern_table().intern(std::move(n)); }

// Deterministic total order (independent of addresses).
inline bool node_less(const NodePtr& a, const NodePtr& b) {
  if (a == b) return false;
  if (a->hash != b->hash) return a->hash < b->hash;
  if (a->op != b->op) return a->op < b->op;
  if (a->block != b->block) return a->block < b->block;
  if (a->k != b->k) return a->k < b->k;
  if (a->r0 != b->r0) return a->r0 < b->r0;
  if (a->r1 != b->r1) return a->r1 < b->r1;
  if (a->c.real() != b->c.real()) return a->c.real() < b->c.real();
  if (a->c.imag() != b->c.imag()) return a->c.imag() < b->c.imag();
  if (a->args.size() != b->args.size()) return a->args.size() < b->args.size();
  for (std::size_t i = 0; i < a->args.size(); ++i) {
    if (node_less(a->args[i], b->args[i])) return true;
    if (node_less(b->args[i], a->args[i])) return false;
  }
  return false;
}

inline cplx ipow(cplx b, int k) {
  if (k < 0) {
    if (b == cplx(0.0)) return {std::numeric_limits<double>::infinity(), 0.0};
    return 1.0 / ipow(b, -k);
  }
  cplx r = 1.0;
  while (k) {
    if (k & 1) r *= b;
    b *= b;
    k >>= 1;
  }
  return r;
}

inline double ipow_real(double b, int k) {
  if (k < 0) {
    if (b == 0.0) return std::numeric_limits<double>::infinity();
    return 1.0 / ipow_real(b, -k);
  }
  double r = 1.0;
  while (k) {
    if (k & 1) r *= b;
    b *= b;
    k >>= 1;
  }
  return r;
}

}  // namespace detail

// Derivatives s^(0..K)(t) of the smooth step s(t) = psi(t)/(psi(t)+psi(1-t)), psi(t) = exp(-1/t),
// by truncated Taylor arithmetic of the closed form. Exact 0/1 outside (0,1).
inline void smooth_step_jet(double t, int K, double* out) {
  for (int j = 0; j <= K; ++j) out[j] = 0.0;
  if (t <= 0.0) return;
  if (t >= 1.0) {
    out[0] = 1.0;
    return;
  }
  const int M = K + 1;
  if (M > 20) throw DomainError("smooth step jet order too high");
  std::array<double, 20> u{}, w{}, P{}, Q{}, D{}, s{};
  // -1/(t+h) = sum u_j h^j ; -1/((1-t)-h) = sum w_j h^j
  const double it = 1.0 / t, iq = 1.0 / (1.0 - t);
  double pt = it, pq = iq;
  for (int j = 0; j < M; ++j) {
    u[j] = ((j % 2) ? 1.0 : -1.0) * pt;
    w[j] = -pq;
    pt *= it;
    pq *= iq;
  }
  auto exp_series = [M](const std::array<double, 20>& a, std::array<double, 20>& e) {
    e[0] = std::exp(a[0]);
    for (int j = 1; j < M; ++j) {
      double acc = 0.0;
      for (int i = 1; i <= j; ++i) acc += i * a[i] * e[j - i];
      e[j] = acc / j;
    }
  };
  exp_series(u, P);
  exp_series(w, Q);
  for (int j = 0; j < M; ++j) D[j] = P[j] + Q[j];
  for (int j = 0; j < M; ++j) {
    double acc = P[j];
    for (int i = 1; i <= j; ++i) acc -= D[i] * s[j - i];
    s[j] = acc / D[0];
  }
  double fact = 1.0;
  for (int j = 0; j < M; ++j) {
    if (j > 0) fact *= j;
    out[j] = s[j] * fact;
  }
}

// ---------------------------------------------------------------------------
// Node factories with constant folding and light canonicalisation.

namespace nodes {

inline NodePtr cst(cplx c) {
  Node n;
  n.op = Op::Const;
  n.c = c;
  return detail::intern(std::move(n));
}

inline NodePtr coord(Block b, int i) {
  Node n;
  n.op = Op::Coord;
  n.block = b;
  n.k = i;
  return detail::intern(std::move(n));
}

inline bool is_const(const NodePtr& n) { return n->op == Op::Const; }
inline bool is_zero(const NodePtr& n) { return n->op == Op::Const && n->c == cplx(0.0); }
inline bool is_one(const NodePtr& n) { return n->op == Op::Const && n->c == cplx(1.0); }

inline NodePtr mul(std::vector<NodePtr> fs);
inline NodePtr pow(const NodePtr& b, int k);

namespace canon {

// Small term lists are searched linearly; the hash index is built once they grow.
inline constexpr std::size_t kLinearScan = 16;

template <class V>
std::size_t find_slot(const std::vector<std::pair<NodePtr, V>>& xs,
                      const std::unordered_map<const Node*, std::size_t>& where, const Node* key) {
  if (!where.empty()) {
    auto it = where.find(key);
    return it == where.end() ? xs.size() : it->second;
  }
  for (std::size_t j = 0; j < xs.size(); ++j)
    if (xs[j].first.get() == key) return j;
  return xs.size();
}

template <class V>
void index_slots(const std::vector<std::pair<NodePtr, V>>& xs, std::unordered_map<const Node*, std::size_t>& where) {
  if (!where.empty()) return;
  for (std::size_t j = 0; j < xs.size(); ++j) where.emplace(xs[j].first.get(), j);
}

// t = c * rest with a leading constant; returns rest (already canonical).
inline NodePtr mul_tail(const NodePtr& t) {
  if (t->args.size() == 2) return t->args[1];
  Node n;
  n.op = Op::Mul;
  n.args.assign(t->args.begin() + 1, t->args.end());
  return detail::intern(std::move(n));
}

// c * r for canonical non-constant r, without renormalising r.
inline NodePtr scaled(cplx c, const NodePtr& r) {
  Node n;
  n.op = Op::Mul;
  n.args.push_back(cst(c));
  if (r->op == Op::Mul)
    n.args.insert(n.args.end(), r->args.begin(), r->args.end());
  else
    n.args.push_back(r);
  return detail::intern(std::move(n));
}

}  // namespace canon

inline NodePtr add(std::vector<NodePtr> ts) {
  std::vector<NodePtr> flat;
  for (auto& t : ts) {
    if (t->op == Op::Add)
      flat.insert(flat.end(), t->args.begin(), t->args.end());
    else
      flat.push_back(t);
  }
  cplx constant = 0.0;
  std::vector<std::pair<NodePtr, cplx>> terms;  // rest -> coefficient, first-seen order
  std::unordered_map<const Node*, std::size_t> where;
  for (auto& t : flat) {
    if (t->op == Op::Const) {
      constant += t->c;
      continue;
    }
    NodePtr rest = t;
    cplx coef = 1.0;
    if (t->op == Op::Mul && t->args.front()->op == Op::Const) {
      coef = t->args.front()->c;
      rest = canon::mul_tail(t);
    }
    const std::size_t at = canon::find_slot(terms, where, rest.get());
    if (at == terms.size()) {
      if (!where.empty() || terms.size() >= canon::kLinearScan)
        canon::index_slots(terms, where), where.emplace(rest.get(), terms.size());
      terms.emplace_back(rest, coef);
    } else {
      terms[at].second += coef;
    }
  }
  std::vector<NodePtr> out;
  for (auto& [rest, coef] : terms) {
    if (coef == cplx(0.0)) continue;
    out.push_back(coef == cplx(1.0) ? rest : canon::scaled(coef, rest));
  }
  if (constant != cplx(0.0)) out.push_back(cst(constant));
  if (out.empty()) return cst(0.0);
  if (out.size() == 1) return out.front();
  std::sort(out.begin(), out.end(), detail::node_less);
  Node n;
  n.op = Op::Add;
  n.args = std::move(out);
  return detail::intern(std::move(n));
}

inline NodePtr mul(std::vector<NodePtr> fs) {
  std::vector<NodePtr> flat;
  for (auto& f : fs) {
    if (f->op == Op::Mul)
      flat.insert(flat.end(), f->args.begin(), f->args.end());
    else
      flat.push_back(f);
  }
  cplx constant = 1.0;
  std::vector<std::pair<NodePtr, int>> bases;
  std::unordered_map<const Node*, std::size_t> where;
  for (auto& f : flat) {
    if (f->op == Op::Const) {
      constant *= f->c;
      continue;
    }
    NodePtr base = f;
    int e = 1;
    if (f->op == Op::Pow) {
      base = f->args.front();
      e = f->k;
    }
    const std::size_t at = canon::find_slot(bases, where, base.get());
    if (at == bases.size()) {
      if (!where.empty() || bases.size() >= canon::kLinearScan)
        canon::index_slots(bases, where), where.emplace(base.get(), bases.size());
      bases.emplace_back(base, e);
    } else {
      bases[at].second += e;
    }
  }
  if (constant == cplx(0.0)) return cst(0.0);
  std::vector<NodePtr> out;
  for (auto& [b, e] : bases) {
    if (e == 0) continue;
    NodePtr p = pow(b, e);
    if (p->op == Op::Const)
      constant *= p->c;
    else
      out.push_back(p);
  }
  if (constant == cplx(0.0)) return cst(0.0);
  std::sort(out.begin(), out.end(), detail::node_less);
  if (out.empty()) return cst(constant);
  if (out.size() == 1 && constant == cplx(1.0)) return out.front();
  if (constant != cplx(1.0)) out.insert(out.begin(), cst(constant));
  Node n;
  n.op = Op::Mul;
  n.args = std::move(out);
  return detail::intern(std::move(n));
}

inline NodePtr pow(const NodePtr& b, int k) {
  if (k == 0) return cst(1.0);
  if (k == 1) return b;
  if (b->op == Op::Const) return cst(detail::ipow(b->c, k));
  if (b->op == Op::Pow) return pow(b->args.front(), b->k * k);
  if (b->op == Op::Mul) {
    std::vector<NodePtr> fs;
    for (auto& f : b->args) fs.push_back(pow(f, k));
    return mul(std::move(fs));
  }
  Node n;
  n.op = Op::Pow;
  n.k = k;
  n.args = {b};
  return detail::intern(std::move(n));
}

inline NodePtr exp(const NodePtr& a) {
  if (a->op == Op::Const) return cst(std::exp(a->c));
  Node n;
  n.op = Op::Exp;
  n.args = {a};
  return detail::intern(std::move(n));
}

inline bool all_const(const std::vector<NodePtr>& v) {
  return std::all_of(v.begin(), v.end(), [](const NodePtr& a) { return a->op == Op::Const; });
}

inline cplx sumsq(const std::vector<NodePtr>& v) {
  cplx s = 0.0;
  for (auto& a : v) s += a->c * a->c;
  return s;
}

inline NodePtr jap(std::vector<NodePtr> v) {
  if (all_const(v)) return cst(std::sqrt(1.0 + sumsq(v)));
  Node n;
  n.op = Op::Jap;
  n.args = std::move(v);
  return detail::intern(std::move(n));
}

inline NodePtr norm(std::vector<NodePtr> v) {
  if (all_const(v)) return cst(std::sqrt(sumsq(v)));
  Node n;
  n.op = Op::Norm;
  n.args = std::move(v);
  return detail::intern(std::move(n));
}

inline NodePtr excision(std::vector<NodePtr> v, double r0, double r1, int k = 0) {
  if (!(r0 > 0.0) || !(r1 > r0)) throw DomainError("excision radii must satisfy 0 < r0 < r1");
  if (all_const(v)) {
    double t = (std::sqrt(sumsq(v)).real() - r0) / (r1 - r0);
    std::vector<double> jet(k + 1);
    smooth_step_jet(t, k, jet.data());
    return cst(jet[k]);
  }
  Node n;
  n.op = Op::Excision;
  n.r0 = r0;
  n.r1 = r1;
  n.k = k;
  n.args = std::move(v);
  return detail::intern(std::move(n));
}

inline std::vector<NodePtr> coords(Block b, int n) {
  std::vector<NodePtr> v;
  for (int i = 0; i < n; ++i) v.push_back(coord(b, i));
  return v;
}

}  // namespace nodes

// ---------------------------------------------------------------------------
// Value handle with arithmetic operators.

class Expr {
 public:
  Expr() : n_(nodes::cst(0.0)) {}
  Expr(NodePtr n) : n_(std::move(n)) {}  // NOLINT(google-explicit-constructor)
  Expr(double c) : n_(nodes::cst(c)) {}  // NOLINT(google-explicit-constructor)
  Expr(cplx c) : n_(nodes::cst(c)) {}    // NOLINT(google-explicit-constructor)

  const NodePtr& node() const { return n_; }
  const Node* operator->() const { return n_.get(); }
  bool is_zero() const { return nodes::is_zero(n_); }
  bool is_const() const { return nodes::is_const(n_); }
  bool same(const Expr& o) const { return n_ == o.n_; }

  static Expr x(int i) { return nodes::coord(Block::x, i); }
  static Expr xi(int i) { return nodes::coord(Block::xi, i); }
  static Expr y(int i) { return nodes::coord(Block::y, i); }
  static Expr jap(const std::vector<Expr>& v) { return nodes::jap(raw(v)); }
  static Expr norm(const std::vector<Expr>& v) { return nodes::norm(raw(v)); }
  static Expr excision(const std::vector<Expr>& v, double r0, double r1, int k = 0) {
    return nodes::excision(raw(v), r0, r1, k);
  }
  static Expr jap_of(Block b, int n) { return nodes::jap(nodes::coords(b, n)); }
  static Expr norm_of(Block b, int n) { return nodes::norm(nodes::coords(b, n)); }
  static std::vector<Expr> vars(Block b, int n) {
    std::vector<Expr> v;
    for (int i = 0; i < n; ++i) v.emplace_back(nodes::coord(b, i));
    return v;
  }

  friend Expr operator+(const Expr& a, const Expr& b) { return nodes::add({a.n_, b.n_}); }
  friend Expr operator-(const Expr& a, const Expr& b) {
    return nodes::add({a.n_, nodes::mul({nodes::cst(-1.0), b.n_})});
  }
  friend Expr operator-(const Expr& a) { return nodes::mul({nodes::cst(-1.0), a.n_}); }
  friend Expr operator*(const Expr& a, const Expr& b) { return nodes::mul({a.n_, b.n_}); }
  friend Expr operator/(const Expr& a, const Expr& b) { return nodes::mul({a.n_, nodes::pow(b.n_, -1)}); }
  Expr& operator+=(const Expr& b) { return *this = *this + b; }
  Expr& operator-=(const Expr& b) { return *this = *this - b; }
  Expr& operator*=(const Expr& b) { return *this = *this * b; }

  static std::vector<NodePtr> raw(const std::vector<Expr>& v) {
    std::vector<NodePtr> r;
    r.reserve(v.size());
    for (auto& e : v) r.push_back(e.n_);
    return r;
  }

 private:
  NodePtr n_;
};

inline Expr pow(const Expr& a, int k) { return nodes::pow(a.node(), k); }
inline Expr inv(const Expr& a) { return nodes::pow(a.node(), -1); }
inline Expr exp(const Expr& a) { return nodes::exp(a.node()); }
inline Expr sum(const std::vector<Expr>& v) { return nodes::add(Expr::raw(v)); }
inline Expr product(const std::vector<Expr>& v) { return nodes::mul(Expr::raw(v)); }

// ---------------------------------------------------------------------------
// Structural transforms.

namespace detail {

struct PtrHash {
  std::size_t operator()(const Node* p) const { return std::hash<const Node*>()(p); }
};
using Memo = std::unordered_map<const Node*, NodePtr, PtrHash>;

inline NodePtr rebuild(const Node& n, std::vector<NodePtr> args) {
  switch (n.op) {
    case Op::Add: return nodes::add(std::move(args));
    case Op::Mul: return nodes::mul(std::move(args));
    case Op::Pow: return nodes::pow(args.front(), n.k);
    case Op::Exp: return nodes::exp(args.front());
    case Op::Jap: return nodes::jap(std::move(args));
    case Op::Norm: return nodes::norm(std::move(args));
    case Op::Excision: return nodes::excision(std::move(args), n.r0, n.r1, n.k);
    default: throw InternalError("rebuild of leaf node");
  }
}

inline NodePtr diff_rec(const NodePtr& n, Block b, int i, Memo& memo) {
  if (auto it = memo.find(n.get()); it != memo.end()) return it->second;
  using namespace nodes;
  NodePtr r;
  switch (n->op) {
    case Op::Const: r = cst(0.0); break;
    case Op::Coord: r = cst((n->block == b && n->k == i) ? 1.0 : 0.0); break;
    case Op::Add: {
      std::vector<NodePtr> ts;
      for (auto& a : n->args) ts.push_back(diff_rec(a, b, i, memo));
      r = add(std::move(ts));
      break;
    }
    case Op::Mul: {
      std::vector<NodePtr> ts;
      for (std::size_t j = 0; j < n->args.size(); ++j) {
        NodePtr d = diff_rec(n->args[j], b, i, memo);
        if (is_zero(d)) continue;
        std::vector<NodePtr> fs = n->args;
        fs[j] = d;
        ts.push_back(mul(std::move(fs)));
      }
      r = add(std::move(ts));
      break;
    }
    case Op::Pow: {
      NodePtr d = diff_rec(n->args.front(), b, i, memo);
      r = is_zero(d) ? cst(0.0) : mul({cst(double(n->k)), pow(n->args.front(), n->k - 1), d});
      break;
    }
    case Op::Exp: {
      NodePtr d = diff_rec(n->args.front(), b, i, memo);
      r = is_zero(d) ? cst(0.0) : mul({n, d});
      break;
    }
    case Op::Jap:
    case Op::Norm:
    case Op::Excision: {
      std::vector<NodePtr> ts;
      for (auto& a : n->args) {
        NodePtr d = diff_rec(a, b, i, memo);
        if (!is_zero(d)) ts.push_back(mul({a, d}));
      }
      NodePtr inner = add(std::move(ts));
      if (is_zero(inner)) {
        r = cst(0.0);
      } else if (n->op == Op::Excision) {
        r = mul({excision(n->args, n->r0, n->r1, n->k + 1), cst(1.0 / (n->r1 - n->r0)), inner,
                 pow(norm(n->args), -1)});
      } else {
        r = mul({inner, pow(n, -1)});
      }
      break;
    }
  }
  memo.emplace(n.get(), r);
  return r;
}

struct VarKey {
  Block b;
  int i;
};

template <class Map>
NodePtr subst_rec(const NodePtr& n, const Map& f, Memo& memo) {
  if (auto it = memo.find(n.get()); it != memo.end()) return it->second;
  NodePtr r;
  if (n->op == Op::Const) {
    r = n;
  } else if (n->op == Op::Coord) {
    r = f(n->block, n->k);
    if (!r) r = n;
  } else {
    std::vector<NodePtr> args;
    for (auto& a : n->args) args.push_back(subst_rec(a, f, memo));
    r = rebuild(*n, std::move(args));
  }
  memo.emplace(n.get(), r);
  return r;
}

inline NodePtr conj_rec(const NodePtr& n, Memo& memo) {
  if (auto it = memo.find(n.get()); it != memo.end()) return it->second;
  NodePtr r;
  if (n->op == Op::Const) {
    r = nodes::cst(std::conj(n->c));
  } else if (n->op == Op::Coord) {
    r = n;
  } else {
    std::vector<NodePtr> args;
    for (auto& a : n->args) args.push_back(conj_rec(a, memo));
    r = rebuild(*n, std::move(args));
  }
  memo.emplace(n.get(), r);
  return r;
}

}  // namespace detail

inline Expr diff(const Expr& e, Block b, int i) {
  detail::Memo memo;
  return detail::diff_rec(e.node(), b, i, memo);
}

// Replace coordinates: f(block, index) returns the replacement or nullptr to keep it.
template <class F>
Expr substitute(const Expr& e, F&& f) {
  detail::Memo memo;
  auto g = [&](Block b, int i) -> NodePtr {
    auto r = f(b, i);
    return r ? NodePtr(r) : NodePtr();
  };
  return detail::subst_rec(e.node(), g, memo);
}

// Replace whole blocks with expression vectors (empty vector keeps the block).
inline Expr substitute_blocks(const Expr& e, const std::vector<Expr>& x, const std::vector<Expr>& xi,
                              const std::vector<Expr>& y = {}) {
  return substitute(e, [&](Block b, int i) -> NodePtr {
    const auto& v = b == Block::x ? x : b == Block::xi ? xi : y;
    if (v.empty()) return nullptr;
    if (i >= static_cast<int>(v.size())) throw DomainError("substitution vector too short");
    return v[i].node();
  });
}

inline Expr conj(const Expr& e) {
  detail::Memo memo;
  return detail::conj_rec(e.node(), memo);
}

// Bitmask of used blocks: 1 = x, 2 = xi, 4 = y.
inline unsigned uses(const Expr& e) {
  std::unordered_map<const Node*, unsigned> memo;
  auto rec = [&](auto&& self, const NodePtr& n) -> unsigned {
    if (auto it = memo.find(n.get()); it != memo.end()) return it->second;
    unsigned m = 0;
    if (n->op == Op::Coord) m = 1u << static_cast<unsigned>(n->block);
    for (auto& a : n->args) m |= self(self, a);
    memo.emplace(n.get(), m);
    return m;
  };
  return rec(rec, e.node());
}

inline std::size_t dag_size(const Expr& e) {
  std::unordered_map<const Node*, bool> seen;
  auto rec = [&](auto&& self, const NodePtr& n) -> void {
    if (!seen.emplace(n.get(), true).second) return;
    for (auto& a : n->args) self(self, a);
  };
  rec(rec, e.node());
  return seen.size();
}

// ---------------------------------------------------------------------------
// Compiled evaluation tape.

class Tape {
 public:
  Tape() = default;
  explicit Tape(const Expr& e) : Tape(std::vector<Expr>{e}) {}

  // Several outputs sharing one instruction list.
  explicit Tape(const std::vector<Expr>& roots) {
    std::unordered_map<const Node*, std::uint32_t> slot;
    auto rec = [&](auto&& self, const NodePtr& n) -> std::uint32_t {
      if (auto it = slot.find(n.get()); it != slot.end()) return it->second;
      std::vector<std::uint32_t> a;
      for (auto& c : n->args) a.push_back(self(self, c));
      Ins ins{n->op, n->block, n->k, n->r0, n->r1, n->c, static_cast<std::uint32_t>(args_.size()),
              static_cast<std::uint32_t>(a.size())};
      args_.insert(args_.end(), a.begin(), a.end());
      code_.push_back(ins);
      auto id = static_cast<std::uint32_t>(code_.size() - 1);
      slot.emplace(n.get(), id);
      return id;
    };
    for (auto& r : roots) out_.push_back(rec(rec, r.node()));
  }

  std::size_t size() const { return code_.size(); }
  std::size_t outputs() const { return out_.size(); }

  cplx operator()(const Point& p) const { return eval(p.x.data(), p.xi.data(), p.y.data()); }

  cplx eval(const double* x, const double* xi, const double* y) const {
    thread_local std::vector<cplx> v;
    v.resize(code_.size());
    for (std::size_t s = 0; s < code_.size(); ++s) v[s] = step(code_[s], v.data(), x, xi, y);
    return v[out_.front()];
  }

  void eval_all(const Point& p, cplx* vals) const {
    thread_local std::vector<cplx> v;
    v.resize(code_.size());
    for (std::size_t s = 0; s < code_.size(); ++s) v[s] = step(code_[s], v.data(), p.x.data(), p.xi.data(), p.y.data());
    for (std::size_t r = 0; r < out_.size(); ++r) vals[r] = v[out_[r]];
  }

  // Value with a first-order running roundoff bound.
  std::pair<cplx, double> eval_bounded(const Point& p) const {
    cplx v;
    double e;
    eval_bounded_all(p, &v, &e);
    return {v, e};
  }

  void eval_bounded_all(const Point& p, cplx* vals, double* errs) const {
    thread_local std::vector<cplx> v;
    thread_local std::vector<double> e;
    v.resize(code_.size());
    e.resize(code_.size());
    const double u = std::numeric_limits<double>::epsilon();
    for (std::size_t s = 0; s < code_.size(); ++s) {
      const Ins& in = code_[s];
      v[s] = step(in, v.data(), p.x.data(), p.xi.data(), p.y.data());
      e[s] = bound(in, v.data(), e.data(), v[s], u);
    }
    for (std::size_t r = 0; r < out_.size(); ++r) {
      vals[r] = v[out_[r]];
      if (errs) errs[r] = 4.0 * e[out_[r]];
    }
  }

 private:
  struct Ins {
    Op op;
    Block block;
    int k;
    double r0, r1;
    cplx c;
    std::uint32_t first, count;
  };

  static cplx sumsq(const Ins& in, const cplx* v, const std::uint32_t* a) {
    cplx s = 0.0;
    for (std::uint32_t j = 0; j < in.count; ++j) s += v[a[j]] * v[a[j]];
    return s;
  }

  cplx step(const Ins& in, const cplx* v, const double* x, const double* xi, const double* y) const {
    const std::uint32_t* a = args_.data() + in.first;
    switch (in.op) {
      case Op::Const: return in.c;
      case Op::Coord: return (in.block == Block::x ? x : in.block == Block::xi ? xi : y)[in.k];
      case Op::Add: {
        cplx s = 0.0;
        for (std::uint32_t j = 0; j < in.count; ++j) s += v[a[j]];
        return s;
      }
      case Op::Mul: {
        cplx p = 1.0;
        for (std::uint32_t j = 0; j < in.count; ++j) {
          if (v[a[j]] == cplx(0.0)) return 0.0;
          p *= v[a[j]];
        }
        return p;
      }
      case Op::Pow: {
        const cplx b = v[a[0]];
        if (b.imag() == 0.0) return detail::ipow_real(b.real(), in.k);
        return detail::ipow(b, in.k);
      }
      case Op::Exp: {
        const cplx b = v[a[0]];
        if (b.imag() == 0.0) return std::exp(b.real());
        return std::exp(b);
      }
      case Op::Jap:
      case Op::Norm: {
        const cplx q = sumsq(in, v, a) + (in.op == Op::Jap ? 1.0 : 0.0);
        if (q.imag() == 0.0 && q.real() >= 0.0) return std::sqrt(q.real());
        return std::sqrt(q);
      }
      case Op::Excision: {
        double r = std::sqrt(sumsq(in, v, a)).real();
        double jet[16];
        if (in.k > 14) throw DomainError("excision derivative order too high");
        smooth_step_jet((r - in.r0) / (in.r1 - in.r0), in.k, jet);
        return jet[in.k];
      }
    }
    return 0.0;
  }

  // |re| + |im|: within sqrt(2) of the modulus, and much cheaper than hypot.
  static double mag(cplx z) { return std::fabs(z.real()) + std::fabs(z.imag()); }

  double bound(const Ins& in, const cplx* v, const double* e, cplx val, double u) const {
    const std::uint32_t* a = args_.data() + in.first;
    switch (in.op) {
      case Op::Const:
      case Op::Coord: return 0.0;
      case Op::Add: {
        double s = 0.0, m = 0.0;
        for (std::uint32_t j = 0; j < in.count; ++j) {
          s += e[a[j]];
          m += mag(v[a[j]]);
        }
        return s + in.count * u * m;
      }
      case Op::Mul: {
        for (std::uint32_t j = 0; j < in.count; ++j)
          if (v[a[j]] == cplx(0.0) && e[a[j]] == 0.0) return 0.0;
        double s = 0.0, prod = 1.0;
        bool zero = false;
        for (std::uint32_t j = 0; j < in.count; ++j) {
          const double m = mag(v[a[j]]);
          zero = zero || m == 0.0;
          prod *= m;
        }
        for (std::uint32_t j = 0; j < in.count; ++j) {
          if (e[a[j]] == 0.0) continue;
          if (!zero) {
            s += e[a[j]] * (prod / mag(v[a[j]]));
            continue;
          }
          double pr = e[a[j]];
          for (std::uint32_t l = 0; l < in.count; ++l)
            if (l != j) pr *= mag(v[a[l]]);
          s += pr;
        }
        return s + 2.0 * in.count * u * mag(val);
      }
      case Op::Pow: {
        double b = mag(v[a[0]]);
        double rel = b > 0 ? e[a[0]] / b : 0.0;
        return mag(val) * (std::abs(in.k) * rel + 2.0 * std::abs(in.k) * u);
      }
      case Op::Exp: return mag(val) * (e[a[0]] + 2.0 * u);
      case Op::Jap:
      case Op::Norm:
      case Op::Excision: {
        double s = 0.0, m = 0.0;
        for (std::uint32_t j = 0; j < in.count; ++j) {
          s += mag(v[a[j]]) * e[a[j]];
          m += std::norm(v[a[j]]);
        }
        double r = std::sqrt(m);
        if (in.op != Op::Excision) {
          double d = mag(val);
          return (d > 0 ? s / d : std::sqrt(s)) + 2.0 * u * d;
        }
        double jet[17];
        double t = (r - in.r0) / (in.r1 - in.r0);
        smooth_step_jet(t, in.k + 1, jet);
        double dr = r > 0 ? s / r : 0.0;
        return std::abs(jet[in.k + 1]) * dr / (in.r1 - in.r0) + 64.0 * u * (1.0 + mag(val));
      }
    }
    return 0.0;
  }

  std::vector<Ins> code_;
  std::vector<std::uint32_t> args_;
  std::vector<std::uint32_t> out_;
};

// ---------------------------------------------------------------------------
// Symbol expression: DAG plus dimensions and declared bi-order.

struct SymbolExpr {
  Expr ast;
  int dim = 1;
  BiOrder order{};
  int theta_dim = 0;  // size of the xi block when it differs from dim (phase variables)

  int xi_dim() const { return theta_dim > 0 ? theta_dim : dim; }
  Tape compile() const { return Tape(ast); }
};

inline SymbolExpr make_symbol(Expr e, int dim, BiOrder order) { return SymbolExpr{std::move(e), dim, order, 0}; }

inline cplx evaluate(const SymbolExpr& s, const Point& p) {
  cplx v = Tape(s.ast)(p);
  if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw DomainError("non-finite symbol value");
  return v;
}

inline void require_same_dim(const SymbolExpr& a, const SymbolExpr& b) {
  if (a.dim != b.dim || a.xi_dim() != b.xi_dim()) throw DomainError("dimension mismatch");
}

inline SymbolExpr operator+(const SymbolExpr& a, const SymbolExpr& b) {
  require_same_dim(a, b);
  return {a.ast + b.ast, a.dim, BiOrder::max(a.order, b.order), a.theta_dim};
}
inline SymbolExpr operator-(const SymbolExpr& a, const SymbolExpr& b) {
  require_same_dim(a, b);
  return {a.ast - b.ast, a.dim, BiOrder::max(a.order, b.order), a.theta_dim};
}
inline SymbolExpr operator*(const SymbolExpr& a, const SymbolExpr& b) {
  require_same_dim(a, b);
  return {a.ast * b.ast, a.dim, a.order + b.order, a.theta_dim};
}
inline SymbolExpr operator*(cplx c, const SymbolExpr& a) { return {Expr(c) * a.ast, a.dim, a.order, a.theta_dim}; }

// Multi-indices of length d with |alpha| <= K, graded then lexicographic.
inline std::vector<std::vector<int>> multi_indices(int d, int K) {
  std::vector<std::vector<int>> out;
  for (int total = 0; total <= K; ++total) {
    std::vector<int> a(d, 0);
    auto rec = [&](auto&& self, int pos, int left) -> void {
      if (pos == d - 1 || d == 0) {
        if (d > 0) a[pos] = left;
        if (d > 0 || left == 0) out.push_back(a);
        return;
      }
      for (int v = left; v >= 0; --v) {
        a[pos] = v;
        self(self, pos + 1, left - v);
      }
    };
    rec(rec, 0, total);
  }
  return out;
}

inline int abs_index(const std::vector<int>& a) {
  int s = 0;
  for (int v : a) s += v;
  return s;
}

inline double factorial_index(const std::vector<int>& a) {
  double f = 1.0;
  for (int v : a)
    for (int j = 2; j <= v; ++j) f *= j;
  return f;
}

inline Expr diff_multi(Expr e, Block b, const std::vector<int>& alpha) {
  for (std::size_t i = 0; i < alpha.size(); ++i)
    for (int r = 0; r < alpha[i]; ++r) e = diff(e, b, static_cast<int>(i));
  return e;
}

inline constexpr int kMaxDerivative = 8;

inline SymbolExpr differentiate(const SymbolExpr& s, const std::vector<int>& alpha, const std::vector<int>& beta) {
  if (abs_index(alpha) + abs_index(beta) > kMaxDerivative) throw DomainError("derivative order above configured max");
  Expr e = diff_multi(s.ast, Block::x, alpha);
  e = diff_multi(e, Block::xi, beta);
  return {e, s.dim, s.order - BiOrder{abs_index(alpha), abs_index(beta)}, s.theta_dim};
}

}  // namespace sgcalc
