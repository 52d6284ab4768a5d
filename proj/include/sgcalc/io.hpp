#pragma once

// JSON descriptors and reports.
//
// Expression nodes use the grammar names Const, CoordX, CoordXi, JapX, JapXi, Add, Mul, IntPow, Exp, Inv and
// Excision, plus CoordY, JapY, Jap (explicit args), Norm and Excision with explicit args for amplitudes,
// principal parts and substituted maps. Schema violations raise SchemaViolation with the JSON pointer of the
// offending value; line_map turns pointers into input lines.

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sgcalc/fio.hpp"
#include "sgcalc/psdo.hpp"
#include "sgcalc/scatgeo.hpp"
#include "sgcalc/symbols.hpp"

namespace sgcalc::io {

using json = nlohmann::json;

class SchemaViolation : public SchemaError {
 public:
  SchemaViolation(std::string pointer, const std::string& what) : SchemaError(what), pointer_(std::move(pointer)) {}
  const std::string& pointer() const noexcept { return pointer_; }

 private:
  std::string pointer_;
};

// ---------------------------------------------------------------------------
// Field access with pointer tracking.

inline const json& field(const json& j, const std::string& key, const std::string& at) {
  if (!j.is_object()) throw SchemaViolation(at, "expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw SchemaViolation(at, "missing field '" + key + "'");
  return *it;
}

inline double get_number(const json& j, const std::string& at) {
  if (!j.is_number()) throw SchemaViolation(at, "expected a number");
  return j.get<double>();
}

inline int get_int(const json& j, const std::string& at) {
  if (!j.is_number_integer()) throw SchemaViolation(at, "expected an integer");
  return j.get<int>();
}

inline std::string get_string(const json& j, const std::string& at) {
  if (!j.is_string()) throw SchemaViolation(at, "expected a string");
  return j.get<std::string>();
}

inline const json& get_array(const json& j, const std::string& at) {
  if (!j.is_array()) throw SchemaViolation(at, "expected an array");
  return j;
}

inline double number_at(const json& j, const std::string& key, const std::string& at) {
  return get_number(field(j, key, at), at + "/" + key);
}

inline int int_at(const json& j, const std::string& key, const std::string& at) {
  return get_int(field(j, key, at), at + "/" + key);
}

inline int int_or(const json& j, const std::string& key, int dflt, const std::string& at) {
  return j.contains(key) ? int_at(j, key, at) : dflt;
}

inline std::vector<double> numbers_at(const json& j, const std::string& key, const std::string& at) {
  const json& a = get_array(field(j, key, at), at + "/" + key);
  std::vector<double> out;
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back(get_number(a[i], at + "/" + key + "/" + std::to_string(i)));
  return out;
}

inline BiOrder biorder_at(const json& j, const std::string& key, const std::string& at) {
  const json& a = get_array(field(j, key, at), at + "/" + key);
  if (a.size() != 2) throw SchemaViolation(at + "/" + key, "order must be [m_e, m_psi]");
  return {get_int(a[0], at + "/" + key + "/0"), get_int(a[1], at + "/" + key + "/1")};
}

inline int dim_at(const json& j, const std::string& at, const char* key = "dim") {
  int n = int_at(j, key, at);
  if (n < 1 || n > 2) throw SchemaViolation(at + "/" + key, "dimension must be 1 or 2");
  return n;
}

inline json cplx_json(cplx c) { return json::array({c.real(), c.imag()}); }

inline json order_json(BiOrder m) { return json::array({m.m_e, m.m_psi}); }

// ---------------------------------------------------------------------------
// Expressions.

struct BlockDims {
  int x = 1, xi = 1, y = 1;
  int of(Block b) const { return b == Block::x ? x : b == Block::xi ? xi : y; }
};

namespace detail {

inline bool is_block(const std::vector<NodePtr>& a, Block b, int n) {
  if (static_cast<int>(a.size()) != n) return false;
  for (int i = 0; i < n; ++i)
    if (a[i]->op != Op::Coord || a[i]->block != b || a[i]->k != i) return false;
  return true;
}

inline bool is_joint(const std::vector<NodePtr>& a, const BlockDims& d) {
  if (static_cast<int>(a.size()) != d.x + d.xi) return false;
  std::vector<NodePtr> lo(a.begin(), a.begin() + d.x), hi(a.begin() + d.x, a.end());
  return is_block(lo, Block::x, d.x) && is_block(hi, Block::xi, d.xi);
}

inline const char* suffix(Block b) { return b == Block::x ? "X" : b == Block::xi ? "Xi" : "Y"; }

inline std::string axis_name(const std::vector<NodePtr>& a, const BlockDims& d) {
  for (Block b : {Block::x, Block::xi, Block::y})
    if (is_block(a, b, d.of(b))) return b == Block::x ? "x" : b == Block::xi ? "xi" : "y";
  if (is_joint(a, d)) return "joint";
  return "";
}

}  // namespace detail

inline json expr_json(const NodePtr& n, const BlockDims& d) {
  json j;
  auto args = [&] {
    json a = json::array();
    for (auto& c : n->args) a.push_back(expr_json(c, d));
    return a;
  };
  switch (n->op) {
    case Op::Const:
      j = {{"kind", "Const"}, {"re", n->c.real()}, {"im", n->c.imag()}};
      break;
    case Op::Coord:
      j = {{"kind", std::string("Coord") + detail::suffix(n->block)}, {"i", n->k}};
      break;
    case Op::Add: j = {{"kind", "Add"}, {"args", args()}}; break;
    case Op::Mul: j = {{"kind", "Mul"}, {"args", args()}}; break;
    case Op::Pow: j = {{"kind", "IntPow"}, {"k", n->k}, {"arg", expr_json(n->args[0], d)}}; break;
    case Op::Exp: j = {{"kind", "Exp"}, {"arg", expr_json(n->args[0], d)}}; break;
    case Op::Jap: {
      for (Block b : {Block::x, Block::xi, Block::y})
        if (detail::is_block(n->args, b, d.of(b))) return {{"kind", std::string("Jap") + detail::suffix(b)}};
      j = {{"kind", "Jap"}, {"args", args()}};
      break;
    }
    case Op::Norm: {
      auto ax = detail::axis_name(n->args, d);
      if (!ax.empty() && ax != "joint") return {{"kind", "Norm"}, {"axis", ax}};
      j = {{"kind", "Norm"}, {"args", args()}};
      break;
    }
    case Op::Excision: {
      auto ax = detail::axis_name(n->args, d);
      j = {{"kind", "Excision"}, {"r0", n->r0}, {"r1", n->r1}};
      if (ax.empty() || ax == "y")
        j["args"] = args();
      else
        j["axis"] = ax;
      if (n->k != 0) j["k"] = n->k;
      break;
    }
  }
  return j;
}

inline json expr_json(const Expr& e, const BlockDims& d) { return expr_json(e.node(), d); }

inline std::vector<Expr> axis_vars(const std::string& ax, const BlockDims& d, const std::string& at) {
  if (ax == "x") return Expr::vars(Block::x, d.x);
  if (ax == "xi") return Expr::vars(Block::xi, d.xi);
  if (ax == "y") return Expr::vars(Block::y, d.y);
  if (ax == "joint") {
    auto v = Expr::vars(Block::x, d.x);
    auto w = Expr::vars(Block::xi, d.xi);
    v.insert(v.end(), w.begin(), w.end());
    return v;
  }
  throw SchemaViolation(at, "axis must be x, xi, y or joint");
}

inline Expr parse_expr(const json& j, const BlockDims& d, const std::string& at) {
  const std::string kind = get_string(field(j, "kind", at), at + "/kind");
  auto sub = [&](const char* key) { return parse_expr(field(j, key, at), d, at + "/" + key); };
  auto list = [&](const char* key) {
    const json& a = get_array(field(j, key, at), at + "/" + key);
    std::vector<Expr> v;
    for (std::size_t i = 0; i < a.size(); ++i) v.push_back(parse_expr(a[i], d, at + "/" + key + "/" + std::to_string(i)));
    return v;
  };
  auto coord = [&](Block b) {
    int i = int_at(j, "i", at);
    if (i < 0 || i >= d.of(b)) throw SchemaViolation(at + "/i", "coordinate index out of range");
    return Expr(nodes::coord(b, i));
  };
  if (kind == "Const") {
    if (j.contains("value")) return Expr(number_at(j, "value", at));
    double im = j.contains("im") ? number_at(j, "im", at) : 0.0;
    return Expr(cplx(number_at(j, "re", at), im));
  }
  if (kind == "CoordX") return coord(Block::x);
  if (kind == "CoordXi") return coord(Block::xi);
  if (kind == "CoordY") return coord(Block::y);
  if (kind == "JapX") return Expr::jap_of(Block::x, d.x);
  if (kind == "JapXi") return Expr::jap_of(Block::xi, d.xi);
  if (kind == "JapY") return Expr::jap_of(Block::y, d.y);
  if (kind == "Jap") return Expr::jap(list("args"));
  if (kind == "Norm") {
    if (j.contains("axis")) return Expr::norm(axis_vars(get_string(j["axis"], at + "/axis"), d, at + "/axis"));
    return Expr::norm(list("args"));
  }
  if (kind == "Add") return sum(list("args"));
  if (kind == "Mul") return product(list("args"));
  if (kind == "IntPow") return pow(sub("arg"), int_at(j, "k", at));
  if (kind == "Inv") return inv(sub("arg"));
  if (kind == "Exp") return exp(sub("arg"));
  if (kind == "Excision") {
    double r0 = number_at(j, "r0", at), r1 = number_at(j, "r1", at);
    if (!(r0 > 0.0) || !(r1 > r0)) throw SchemaViolation(at, "excision radii must satisfy 0 < r0 < r1");
    int k = int_or(j, "k", 0, at);
    auto v = j.contains("axis") ? axis_vars(get_string(j["axis"], at + "/axis"), d, at + "/axis") : list("args");
    return Expr::excision(v, r0, r1, k);
  }
  throw SchemaViolation(at + "/kind", "unknown node kind '" + kind + "'");
}

inline std::vector<Expr> parse_expr_list(const json& j, const std::string& key, const BlockDims& d,
                                         const std::string& at, int expected = -1) {
  const json& a = get_array(field(j, key, at), at + "/" + key);
  if (expected >= 0 && static_cast<int>(a.size()) != expected)
    throw SchemaViolation(at + "/" + key, "expected " + std::to_string(expected) + " components");
  std::vector<Expr> v;
  for (std::size_t i = 0; i < a.size(); ++i) v.push_back(parse_expr(a[i], d, at + "/" + key + "/" + std::to_string(i)));
  return v;
}

inline json expr_list_json(const std::vector<Expr>& v, const BlockDims& d) {
  json a = json::array();
  for (auto& e : v) a.push_back(expr_json(e, d));
  return a;
}

// ---------------------------------------------------------------------------
// Symbols.

inline BlockDims dims_of(int n, int theta = 0) { return {n, theta > 0 ? theta : n, n}; }

inline json symbol_json(const SymbolExpr& s) {
  json j = {{"dim", s.dim}, {"order", order_json(s.order)}, {"ast", expr_json(s.ast, dims_of(s.dim, s.theta_dim))}};
  if (s.theta_dim > 0 && s.theta_dim != s.dim) j["theta_dim"] = s.theta_dim;
  return j;
}

inline json classical_json(const ClassicalSymbol& c) {
  json j = symbol_json(c.base);
  j["kind"] = "symbol";
  if (!c.matrix.empty()) {
    json m = json::array();
    for (auto& [jk, h] : c.matrix) {
      if (!h.expr) continue;
      json e = {{"j", jk.first}, {"k", jk.second}, {"ast", expr_json(h.expr->ast, dims_of(c.dim()))}};
      e["degree_e"] = h.degree_e ? json(*h.degree_e) : json(nullptr);
      e["degree_psi"] = h.degree_psi ? json(*h.degree_psi) : json(nullptr);
      m.push_back(e);
    }
    j["matrix"] = m;
  }
  return j;
}

inline SymbolExpr parse_symbol_expr(const json& j, const std::string& at) {
  const int n = dim_at(j, at);
  const int td = int_or(j, "theta_dim", 0, at);
  if (td < 0 || td > kMaxVars) throw SchemaViolation(at + "/theta_dim", "theta_dim out of range");
  return SymbolExpr{parse_expr(field(j, "ast", at), dims_of(n, td), at + "/ast"), n, biorder_at(j, "order", at),
                    td == n ? 0 : td};
}

inline ClassicalSymbol parse_symbol(const json& j, const std::string& at = "") {
  ClassicalSymbol c = classical(parse_symbol_expr(j, at));
  if (j.contains("matrix")) {
    const json& m = get_array(j["matrix"], at + "/matrix");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const std::string p = at + "/matrix/" + std::to_string(i);
      int jj = int_at(m[i], "j", p), kk = int_at(m[i], "k", p);
      if (jj < 0 || kk < 0) throw SchemaViolation(p, "matrix indices must be non-negative");
      BiOrder deg{c.order().m_e - kk, c.order().m_psi - jj};
      auto want = [&](const char* key, int d) {
        if (m[i].contains(key) && !m[i][key].is_null() && get_int(m[i][key], p + "/" + key) != d)
          throw SchemaViolation(p + "/" + key, "entry (j,k) must have degrees (m_e - k, m_psi - j)");
      };
      want("degree_e", deg.m_e);
      want("degree_psi", deg.m_psi);
      auto e = parse_expr(field(m[i], "ast", p), dims_of(c.dim()), p + "/ast");
      c.matrix.emplace(std::make_pair(jj, kk),
                       HomogeneousComponent::closed(make_symbol(e, c.dim(), deg), deg.m_e, deg.m_psi, Region::both));
    }
  }
  return c;
}

inline json amplitude_json(const Amplitude& a) {
  return {{"kind", "amplitude"},
          {"dim", a.dim},
          {"orders", json::array({a.order[0], a.order[1], a.order[2]})},
          {"ast", expr_json(a.ast, dims_of(a.dim, a.theta_dim))}};
}

inline std::array<int, 3> orders_at(const json& j, const std::string& at) {
  if (!j.contains("orders")) return {0, 0, 0};
  const json& o = get_array(j["orders"], at + "/orders");
  if (o.size() != 3) throw SchemaViolation(at + "/orders", "orders must be [m1, m2, m3]");
  return {get_int(o[0], at + "/orders/0"), get_int(o[1], at + "/orders/1"), get_int(o[2], at + "/orders/2")};
}

inline Amplitude parse_amplitude(const json& j, const std::string& at = "") {
  const int n = dim_at(j, at);
  const int td = int_or(j, "theta_dim", 0, at);
  return Amplitude{parse_expr(field(j, "ast", at), dims_of(n, td), at + "/ast"), n, orders_at(j, at),
                   td == n ? 0 : td};
}

// ---------------------------------------------------------------------------
// Phases and FIOs.

inline json phase_json(const PhasePair& p) {
  const BlockDims d = dims_of(p.dim(), p.theta_dim);
  return {{"f", expr_json(p.f.ast, d)},
          {"g", expr_json(p.g.ast, d)},
          {"theta_dim", p.theta_dim},
          {"regular_split", p.regular_split},
          {"class", phase_class_name(p.cls)}};
}

inline PhasePair parse_phase(const json& j, int n, const std::string& at) {
  PhasePair p;
  p.theta_dim = int_or(j, "theta_dim", n, at);
  if (p.theta_dim < n || p.theta_dim > kMaxVars) throw SchemaViolation(at + "/theta_dim", "theta_dim must lie in [n, 8]");
  const BlockDims d = dims_of(n, p.theta_dim);
  p.f = SymbolExpr{parse_expr(field(j, "f", at), d, at + "/f"), n, BiOrder::diag(1), p.theta_dim};
  p.g = SymbolExpr{parse_expr(field(j, "g", at), d, at + "/g"), n, BiOrder::diag(1), p.theta_dim};
  if (j.contains("regular_split")) {
    const json& r = get_array(j["regular_split"], at + "/regular_split");
    for (std::size_t i = 0; i < r.size(); ++i) {
      int v = get_int(r[i], at + "/regular_split/" + std::to_string(i));
      if (v < 0 || v >= p.theta_dim) throw SchemaViolation(at + "/regular_split/" + std::to_string(i), "index out of range");
      p.regular_split.push_back(v);
    }
  } else {
    for (int i = 0; i < n; ++i) p.regular_split.push_back(i);
  }
  if (static_cast<int>(p.regular_split.size()) != n)
    throw SchemaViolation(at + "/regular_split", "regular split must name n theta variables");
  std::string cls = j.contains("class") ? get_string(j["class"], at + "/class") : "Q";
  if (cls == "Q")
    p.cls = PhaseClass::Q;
  else if (cls == "Q_gen")
    p.cls = PhaseClass::Q_gen;
  else
    throw SchemaViolation(at + "/class", "class must be Q or Q_gen");
  return p;
}

inline json fio_json(const FIOHandle& A) {
  return {{"kind", "fio"},
          {"dim", A.dim()},
          {"phase", phase_json(A.phase)},
          {"amplitude", expr_json(A.amplitude.ast, dims_of(A.dim(), A.phase.theta_dim))},
          {"orders", json::array({A.amplitude.order[0], A.amplitude.order[1], A.amplitude.order[2]})},
          {"band", A.band}};
}

inline FIOHandle parse_fio(const json& j, const GridSpec& s, const std::string& at = "") {
  const int n = dim_at(j, at);
  if (n != s.n) throw SchemaViolation(at + "/dim", "descriptor dimension differs from the grid");
  PhasePair p = parse_phase(field(j, "phase", at), n, at + "/phase");
  Expr amp = j.contains("amplitude") ? parse_expr(j["amplitude"], dims_of(n, p.theta_dim), at + "/amplitude") : Expr(1.0);
  double band = j.contains("band") ? number_at(j, "band", at) : 1.0;
  if (!(band > 0.0 && band <= 1.0)) throw SchemaViolation(at + "/band", "band must lie in (0, 1]");
  return make_fio(p, amp, s, band, orders_at(j, at));
}

// ---------------------------------------------------------------------------
// Canonical maps and SCT data.

inline Matrix matrix_at(const json& j, const std::string& key, int n, const std::string& at) {
  const json& a = get_array(field(j, key, at), at + "/" + key);
  if (static_cast<int>(a.size()) != n) throw SchemaViolation(at + "/" + key, "matrix must be n x n");
  Matrix m(n, std::vector<double>(n));
  for (int r = 0; r < n; ++r) {
    const std::string pr = at + "/" + key + "/" + std::to_string(r);
    const json& row = get_array(a[r], pr);
    if (static_cast<int>(row.size()) != n) throw SchemaViolation(pr, "matrix must be n x n");
    for (int c = 0; c < n; ++c) m[r][c] = get_number(row[c], pr + "/" + std::to_string(c));
  }
  return m;
}

inline json map_json(const CanonicalMap& m) {
  const BlockDims d = dims_of(m.n);
  return {{"kind", "map"},      {"name", m.name},
          {"dim", m.n},         {"y", expr_list_json(m.y, d)},
          {"eta", expr_list_json(m.eta, d)}, {"Xi", expr_list_json(m.Xi, d)},
          {"Y", expr_list_json(m.Y, d)}};
}

// Family shorthand {"family": identity | dilation (c) | linear (L) | shear (S)} or explicit components.
inline CanonicalMap parse_map(const json& j, const std::string& at = "") {
  const int n = dim_at(j, at);
  if (j.contains("family")) {
    const std::string fam = get_string(j["family"], at + "/family");
    if (fam == "identity") return identity_map(n);
    if (fam == "dilation") {
      double c = number_at(j, "c", at);
      if (!(c > 0.0)) throw SchemaViolation(at + "/c", "dilation factor must be positive");
      return dilation_map(n, c);
    }
    if (fam == "linear") {
      Matrix L = matrix_at(j, "L", n, at);
      if (std::abs(determinant(L)) < 1e-12) throw SchemaViolation(at + "/L", "L must be invertible");
      return linear_map(L);
    }
    if (fam == "shear") return shear_map(matrix_at(j, "S", n, at));
    throw SchemaViolation(at + "/family", "unknown map family '" + fam + "'");
  }
  const BlockDims d = dims_of(n);
  CanonicalMap m;
  m.name = j.contains("name") ? get_string(j["name"], at + "/name") : "map";
  m.n = n;
  m.y = parse_expr_list(j, "y", d, at, n);
  m.eta = parse_expr_list(j, "eta", d, at, n);
  m.Xi = parse_expr_list(j, "Xi", d, at, n);
  m.Y = parse_expr_list(j, "Y", d, at, n);
  return m;
}

inline json sct_json(const SCTSpec& s) {
  const BlockDims d = dims_of(s.n);
  return {{"kind", "sct"},
          {"dim", s.n},
          {"chi_e", {{"T", expr_list_json(s.T, d)}, {"H", expr_list_json(s.H, d)}}},
          {"chi_psi", {{"Y", expr_list_json(s.Y, d)}, {"G", expr_list_json(s.G, d)}}},
          {"chi_psie", {{"A", expr_list_json(s.A, d)}, {"B", expr_list_json(s.B, d)}}},
          {"sections", {{"f_e", expr_json(s.f_e, d)}, {"f_psi", expr_json(s.f_psi, d)}}}};
}

inline SCTSpec parse_sct(const json& j, const std::string& at = "") {
  SCTSpec s;
  s.n = dim_at(j, at);
  const BlockDims d = dims_of(s.n);
  const json& e = field(j, "chi_e", at);
  const json& p = field(j, "chi_psi", at);
  const json& c = field(j, "chi_psie", at);
  const json& sec = field(j, "sections", at);
  s.T = parse_expr_list(e, "T", d, at + "/chi_e", s.n);
  s.H = parse_expr_list(e, "H", d, at + "/chi_e", s.n);
  s.Y = parse_expr_list(p, "Y", d, at + "/chi_psi", s.n);
  s.G = parse_expr_list(p, "G", d, at + "/chi_psi", s.n);
  s.A = parse_expr_list(c, "A", d, at + "/chi_psie", s.n);
  s.B = parse_expr_list(c, "B", d, at + "/chi_psie", s.n);
  s.f_e = parse_expr(field(sec, "f_e", at + "/sections"), d, at + "/sections/f_e");
  s.f_psi = parse_expr(field(sec, "f_psi", at + "/sections"), d, at + "/sections/f_psi");
  return s;
}

inline OrderReductionData parse_order_reduction(const json& j, const std::string& at = "") {
  const BlockDims d = dims_of(dim_at(j, at));
  auto e = [&](const char* key) { return parse_expr(field(j, key, at), d, at + "/" + key); };
  return {e("p_e"), e("p_e_tilde"), e("p_psi"), e("p_psi_tilde")};
}

inline Face parse_face(const std::string& s, const std::string& at) {
  if (s == "e") return Face::e;
  if (s == "psi") return Face::psi;
  if (s == "psie") return Face::psie;
  throw SchemaViolation(at, "face must be e, psi or psie");
}

// ---------------------------------------------------------------------------
// Reports.

inline json estimate_json(const EstimateReport& r) {
  json entries = json::array();
  for (auto& e : r.entries)
    entries.push_back({{"index", e.index},
                       {"worst_ratio", e.worst_ratio},
                       {"reference", e.reference},
                       {"growth", e.growth},
                       {"pass", e.pass}});
  return {{"order_tested", order_json(r.order_tested)},
          {"max_deriv", r.max_deriv},
          {"worst_ratio", r.worst()},
          {"pass", r.pass},
          {"entries", entries}};
}

inline json point_json(const Point& p, int n, bool with_y = false) {
  json j = {{"x", std::vector<double>(p.x.begin(), p.x.begin() + n)},
            {"xi", std::vector<double>(p.xi.begin(), p.xi.begin() + n)}};
  if (with_y) j["y"] = std::vector<double>(p.y.begin(), p.y.begin() + n);
  return j;
}

// ---------------------------------------------------------------------------
// Input lines of JSON values, keyed by JSON pointer.

namespace detail {

// Input iterator over the text that counts newlines as the parser consumes them.
struct CountingIterator {
  using iterator_category = std::input_iterator_tag;
  using value_type = char;
  using difference_type = std::ptrdiff_t;
  using pointer = const char*;
  using reference = const char&;

  const char* p = nullptr;
  int* line = nullptr;

  reference operator*() const { return *p; }
  CountingIterator& operator++() {
    if (*p == '\n') ++*line;
    ++p;
    return *this;
  }
  CountingIterator operator++(int) {
    auto t = *this;
    ++*this;
    return t;
  }
  bool operator==(const CountingIterator& o) const { return p == o.p; }
  bool operator!=(const CountingIterator& o) const { return p != o.p; }
};

class LineSax : public nlohmann::json_sax<json> {
 public:
  LineSax(const int* line, std::map<std::string, int>* out) : line_(line), out_(out) {}

  bool null() override { return value(); }
  bool boolean(bool) override { return value(); }
  bool number_integer(number_integer_t) override { return value(); }
  bool number_unsigned(number_unsigned_t) override { return value(); }
  bool number_float(number_float_t, const string_t&) override { return value(); }
  bool string(string_t&) override { return value(); }
  bool binary(binary_t&) override { return value(); }
  bool start_object(std::size_t) override { return open(false); }
  bool end_object() override { return close(); }
  bool start_array(std::size_t) override { return open(true); }
  bool end_array() override { return close(); }
  bool key(string_t& k) override {
    stack_.back().key = escape(k);
    return true;
  }
  bool parse_error(std::size_t, const std::string&, const nlohmann::detail::exception&) override { return false; }

 private:
  struct Frame {
    std::string path, key;
    bool array = false;
    std::size_t index = 0;
  };

  static std::string escape(const std::string& k) {
    std::string r;
    for (char c : k) r += c == '~' ? "~0" : c == '/' ? "~1" : std::string(1, c);
    return r;
  }

  std::string next_path() {
    if (stack_.empty()) return "";
    auto& f = stack_.back();
    return f.path + "/" + (f.array ? std::to_string(f.index++) : f.key);
  }
  bool value() {
    out_->emplace(next_path(), *line_);
    return true;
  }
  bool open(bool array) {
    std::string p = next_path();
    out_->emplace(p, *line_);
    stack_.push_back({p, "", array, 0});
    return true;
  }
  bool close() {
    stack_.pop_back();
    return true;
  }

  const int* line_;
  std::map<std::string, int>* out_;
  std::vector<Frame> stack_;
};

}  // namespace detail

// Pointer -> 1-based line of the value. The parser reads one character ahead, so a value at the end of a
// line can be attributed to that line or the next; the nearest recorded ancestor is used for missing keys.
inline std::map<std::string, int> line_map(const std::string& text) {
  std::map<std::string, int> out;
  int line = 1;
  detail::CountingIterator b{text.data(), &line}, e{text.data() + text.size(), &line};
  detail::LineSax sax(&line, &out);
  json::sax_parse(b, e, &sax);
  return out;
}

inline int line_of(const std::map<std::string, int>& lines, std::string pointer) {
  while (true) {
    auto it = lines.find(pointer);
    if (it != lines.end()) return it->second;
    if (pointer.empty()) return 1;
    pointer = pointer.substr(0, pointer.rfind('/'));
  }
}

}  // namespace sgcalc::io
