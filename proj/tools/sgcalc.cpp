// sgcalc: batch front-end over the symbol, quantization, geometry and FIO modules.
//
// Exit status: 0 when the report passes, 1 when it fails its contract (the report is still written), 2 on
// input errors (unknown verb, unreadable file, JSON or schema violation).

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "sgcalc/sgcalc.hpp"

using namespace sgcalc;
using io::json;

namespace {

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Doc {
  std::string path, text;
  json j;
  std::string kind;
};

struct Options {
  std::vector<std::string> inputs;
  std::optional<int> N;
  std::optional<double> L;
  std::optional<double> tol;
  std::optional<int> trunc;
  std::string out;
  bool json_stdout = false;
  std::string op;
  std::string face;
  std::vector<double> order;
  std::vector<int> alpha, beta, weight;
  std::string probe = "plane";
  int max_deriv = -1;
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

struct Outcome {
  json report = json::object();
  bool pass = true;
  Table table;
};

struct Run {
  const Options& opt;
  std::vector<Doc> docs;

  double tol(double dflt) const { return opt.tol.value_or(dflt); }
  int trunc(int dflt) const { return opt.trunc.value_or(dflt); }

  const Doc& doc(std::size_t i) const {
    if (i >= docs.size()) throw InputError("missing input file #" + std::to_string(i + 1));
    return docs[i];
  }

  // Schema violations are reported against the input line of the offending value.
  template <class F>
  auto parse(std::size_t i, F&& f) const {
    const Doc& d = doc(i);
    try {
      return f(d.j);
    } catch (const io::SchemaViolation& e) {
      int line = io::line_of(io::line_map(d.text), e.pointer());
      throw InputError(d.path + ":" + std::to_string(line) + ": " + (e.pointer().empty() ? "/" : e.pointer()) + ": " +
                       e.what());
    }
  }

  ClassicalSymbol symbol(std::size_t i) const {
    return parse(i, [](const json& j) { return io::parse_symbol(j); });
  }
  int dim(std::size_t i) const {
    return parse(i, [](const json& j) { return io::dim_at(j, ""); });
  }

  GridSpec grid(int n) const {
    GridSpec s = GridSpec::standard(n);
    if (opt.N) s.N = *opt.N;
    if (opt.L) s.L = *opt.L;
    try {
      s.validate();
    } catch (const DomainError& e) {
      throw InputError(std::string("--grid/--box: ") + e.what());
    }
    return s;
  }
  GridSpec symmetric_grid(int n) const { return GridSpec::symmetric(n, opt.N.value_or(GridSpec::standard(n).N)); }

  FIOHandle fio(std::size_t i) const {
    GridSpec s = grid(dim(i));
    return parse(i, [&](const json& j) { return io::parse_fio(j, s); });
  }

  GridFunction function(std::size_t i, const GridSpec& s) const {
    Expr f = parse(i, [&](const json& j) {
      if (io::dim_at(j, "") != s.n) throw io::SchemaViolation("/dim", "function dimension differs from the grid");
      return io::parse_expr(io::field(j, "ast", ""), io::dims_of(s.n), "/ast");
    });
    Tape t(f);
    return GridFunction::sample(s, [&](const double* p) {
      Point q;
      for (int d = 0; d < s.n; ++d) q.x[d] = p[d];
      return t(q);
    });
  }

  BiOrder biorder_flag(const std::vector<int>& v, const char* name) const {
    if (v.size() != 2) throw InputError(std::string("--") + name + " needs two integers");
    return {v[0], v[1]};
  }

  std::optional<Face> face() const {
    if (opt.face.empty()) return std::nullopt;
    if (opt.face == "e") return Face::e;
    if (opt.face == "psi") return Face::psi;
    if (opt.face == "psie") return Face::psie;
    throw InputError("--face must be e, psi or psie");
  }
};

json grid_json(const GridSpec& s) { return {{"n", s.n}, {"L", s.L}, {"N", s.N}}; }

Probe probe_flag(const Run& r) {
  if (r.opt.probe == "plane") return Probe::plane;
  if (r.opt.probe == "windowed") return Probe::windowed;
  throw InputError("--probe must be plane or windowed");
}

std::vector<GridFunction> battery_or(const Run& r, std::size_t i, const GridSpec& s) {
  if (i < r.docs.size()) return {r.function(i, s)};
  return test_battery(s);
}

void function_table(Outcome& o, const GridFunction& v) {
  const GridSpec& s = v.spec;
  o.table.header = s.n == 1 ? std::vector<std::string>{"x", "re", "im"} : std::vector<std::string>{"x1", "x2", "re", "im"};
  double p[2];
  for (std::size_t j = 0; j < v.v.size(); ++j) {
    s.point_x(j, p);
    std::vector<double> row(p, p + s.n);
    row.push_back(v.v[j].real());
    row.push_back(v.v[j].imag());
    o.table.rows.push_back(row);
  }
}

void sample_table(Outcome& o, int n, const std::vector<SymbolSample>& pts, const std::vector<cplx>& got,
                  const std::vector<cplx>& want) {
  o.table.header = n == 1 ? std::vector<std::string>{"x", "xi", "re", "im", "expected_re", "expected_im"}
                          : std::vector<std::string>{"x1", "x2", "xi1", "xi2", "re", "im", "expected_re", "expected_im"};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    std::vector<double> row;
    for (int d = 0; d < n; ++d) row.push_back(pts[i].x[d]);
    for (int d = 0; d < n; ++d) row.push_back(pts[i].xi[d]);
    row.insert(row.end(), {got[i].real(), got[i].imag(), want[i].real(), want[i].imag()});
    o.table.rows.push_back(row);
  }
}

double rel_err(cplx got, cplx want) { return std::abs(got - want) / std::max(1.0, std::abs(want)); }

bool nonincreasing(const std::vector<double>& v) {
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[k - 1] * (1.0 + 1e-6) + 1e-12) return false;
  return true;
}

// ---------------------------------------------------------------------------
// symbols

Outcome op_check_sg_estimate(Run& r) {
  auto a = r.symbol(0);
  auto rep = check_sg_estimate(a.base, a.order(), r.opt.max_deriv);
  Outcome o;
  o.report["estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_differentiate(Run& r) {
  auto a = r.symbol(0);
  const int n = a.dim();
  auto pad = [&](std::vector<int> v, const char* name) {
    if (v.empty()) v.assign(n, 0);
    if (static_cast<int>(v.size()) != n) throw InputError(std::string("--") + name + " needs n entries");
    for (int k : v)
      if (k < 0) throw InputError(std::string("--") + name + " entries must be non-negative");
    return v;
  };
  auto al = pad(r.opt.alpha, "alpha"), be = pad(r.opt.beta, "beta");
  auto d = differentiate(a.base, al, be);
  auto rep = check_sg_estimate(d, d.order, r.opt.max_deriv);
  Outcome o;
  o.report["alpha"] = al;
  o.report["beta"] = be;
  o.report["derivative"] = io::symbol_json(d);
  o.report["estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_is_elliptic(Run& r) {
  auto e = is_elliptic(r.symbol(0));
  Outcome o;
  o.report["elliptic"] = e.elliptic;
  o.report["margin"] = e.margin;
  o.pass = e.elliptic;
  return o;
}

Outcome op_principal_limit(Run& r) {
  auto a = r.symbol(0);
  const int n = a.dim();
  const double tol = r.tol(1e-6);
  Outcome o;
  o.table.header = n == 1 ? std::vector<std::string>{"face", "x", "xi", "re", "im"}
                          : std::vector<std::string>{"face", "x1", "x2", "xi1", "xi2", "re", "im"};
  std::vector<Face> faces = r.face() ? std::vector<Face>{*r.face()} : std::vector<Face>{Face::e, Face::psi, Face::psie};
  json per = json::object();
  for (Face f : faces) {
    auto h = principal_limit(a.base, f);
    auto pts = face_samples(f, n);
    double defect = homogeneity_defect(h, f, face_degree(f, a.order()), pts);
    json fj = {{"homogeneity_defect", defect}, {"samples", pts.size()}};
    if (auto cf = principal_part(a.base, f, a.order())) {
      Tape t(cf->ast);
      double gap = 0.0;
      for (auto& p : pts) gap = std::max(gap, rel_err(t(p), h(p)));
      fj["closed_form"] = io::expr_json(cf->ast, io::dims_of(n));
      fj["closed_form_gap"] = gap;
      o.pass = o.pass && gap <= tol;
    }
    o.pass = o.pass && defect <= tol;
    for (auto& p : pts) {
      cplx v = h(p);
      std::vector<double> row{static_cast<double>(f)};
      for (int d = 0; d < n; ++d) row.push_back(p.x[d]);
      for (int d = 0; d < n; ++d) row.push_back(p.xi[d]);
      row.insert(row.end(), {v.real(), v.imag()});
      o.table.rows.push_back(row);
    }
    per[face_name(f)] = fj;
  }
  o.report["faces"] = per;
  return o;
}

Outcome op_associated_symbol(Run& r) {
  auto a = r.symbol(0);
  auto t = principal_triple(a);
  Outcome o;
  o.report["triple_compatibility"] = triple_compatibility(t);
  auto c = associated_symbol(t);
  o.report["symbol"] = io::classical_json(c);
  // a minus its associated symbol drops one order in both components
  auto rest = make_symbol(a.base.ast - c.base.ast, a.dim(), a.order() - BiOrder::diag(1));
  auto rep = check_sg_estimate(rest, rest.order, r.opt.max_deriv);
  o.report["remainder_estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_asymptotic_sum(Run& r) {
  struct Terms {
    std::vector<HomogeneousComponent> terms;
    ExcisionFunction chi;
    Direction dir = Direction::psi;
    int n = 1;
  };
  auto in = r.parse(0, [](const json& j) {
    Terms t;
    t.n = io::dim_at(j, "");
    std::string d = io::get_string(io::field(j, "direction", ""), "/direction");
    if (d == "psi")
      t.dir = Direction::psi;
    else if (d == "e")
      t.dir = Direction::e;
    else
      throw io::SchemaViolation("/direction", "direction must be psi or e");
    if (j.contains("chi")) t.chi = {io::number_at(j["chi"], "r0", "/chi"), io::number_at(j["chi"], "r1", "/chi")};
    if (!(t.chi.r0 > 0.0) || !(t.chi.r1 > t.chi.r0)) throw io::SchemaViolation("/chi", "need 0 < r0 < r1");
    const json& a = io::get_array(io::field(j, "terms", ""), "/terms");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::string at = "/terms/" + std::to_string(i);
      auto opt_int = [&](const char* key) -> std::optional<int> {
        if (!a[i].contains(key) || a[i][key].is_null()) return std::nullopt;
        return io::int_at(a[i], key, at);
      };
      auto de = opt_int("degree_e"), dp = opt_int("degree_psi");
      Expr e = io::parse_expr(io::field(a[i], "ast", at), io::dims_of(t.n), at + "/ast");
      BiOrder m{de.value_or(0), dp.value_or(0)};
      t.terms.push_back(HomogeneousComponent::closed(make_symbol(e, t.n, m), de, dp,
                                                     t.dir == Direction::psi ? Region::xi_ge1 : Region::x_ge1));
    }
    return t;
  });
  auto s = asymptotic_sum(in.terms, in.chi, in.dir, in.n);
  auto rep = check_sg_estimate(s.symbol, s.symbol.order, r.opt.max_deriv);
  Outcome o;
  o.report["symbol"] = io::symbol_json(s.symbol);
  o.report["scales"] = s.scales;
  o.report["estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_poisson_bracket(Run& r) {
  auto a = r.symbol(0), b = r.symbol(1);
  auto c = poisson_bracket(a.base, b.base);
  auto rep = check_sg_estimate(c, c.order, r.opt.max_deriv);
  Outcome o;
  o.report["bracket"] = io::symbol_json(c);
  o.report["estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_bracket_principal_check(Run& r) {
  auto res = bracket_principal_check(r.symbol(0), r.symbol(1));
  Outcome o;
  o.report["residual"] = {{"e", res.e}, {"psi", res.psi}, {"psie", res.psie}};
  o.pass = res.max() <= r.tol(1e-6);
  return o;
}

Outcome op_weight_multiply(Run& r) {
  auto a = r.symbol(0);
  auto c = weight_multiply(a.base, r.biorder_flag(r.opt.weight, "weight"));
  auto rep = check_sg_estimate(c, c.order, r.opt.max_deriv);
  Outcome o;
  o.report["symbol"] = io::symbol_json(c);
  o.report["estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

// ---------------------------------------------------------------------------
// psdo

Outcome op_quantize(Run& r) {
  auto a = r.symbol(0);
  auto s = r.grid(a.dim());
  auto v = quantize(a, s)(r.function(1, s));
  Outcome o;
  o.report["norm"] = v.norm();
  function_table(o, v);
  return o;
}

Outcome op_leibniz_product(Run& r) {
  auto a = r.symbol(0), b = r.symbol(1);
  const int K = r.trunc(3);
  auto s = r.grid(a.dim());
  auto bat = test_battery(s);
  auto ref = quantize(a, s) * quantize(b, s);
  std::vector<double> res;
  json per = json::array();
  ClassicalSymbol c;
  for (int k = 0; k <= K; ++k) {
    c = leibniz_product(a, b, k);
    res.push_back(battery_residual(quantize(c, s), ref, bat));
    per.push_back({{"K", k}, {"residual", res.back()}});
  }
  Outcome o;
  o.report["symbol"] = io::classical_json(c);
  o.report["residuals"] = per;
  o.pass = nonincreasing(res);
  o.table.header = {"K", "residual"};
  for (int k = 0; k <= K; ++k) o.table.rows.push_back({double(k), res[k]});
  return o;
}

Outcome op_formal_adjoint(Run& r) {
  auto a = r.symbol(0);
  const int K = r.trunc(2);
  auto s = r.grid(a.dim());
  auto bat = test_battery(s);
  auto A = quantize(a, s);
  // <Au, v> - <u, Op(a*)v> over the battery, per truncation depth
  std::vector<double> res;
  json per = json::array();
  ClassicalSymbol q;
  for (int k = 0; k <= K; ++k) {
    q = formal_adjoint(a, k);
    auto B = quantize(q, s);
    double worst = 0.0;
    for (auto& u : bat)
      for (auto& v : bat) worst = std::max(worst, std::abs(inner_product(A(u), v) - inner_product(u, B(v))));
    res.push_back(worst);
    per.push_back({{"K", k}, {"pairing_defect", worst}});
  }
  Outcome o;
  o.report["symbol"] = io::classical_json(q);
  o.report["residuals"] = per;
  o.pass = nonincreasing(res);
  o.table.header = {"K", "pairing_defect"};
  for (int k = 0; k <= K; ++k) o.table.rows.push_back({double(k), res[k]});
  return o;
}

Outcome op_parametrix(Run& r) {
  auto a = r.symbol(0);
  const int K = r.trunc(2);
  auto q = parametrix(a, K);
  auto res = parametrix_residual(a, q, K);
  BiOrder target = -BiOrder::diag(K + 1);
  auto rep = check_sg_estimate(make_symbol(res.ast, a.dim(), target), target, r.opt.max_deriv);
  Outcome o;
  o.report["symbol"] = io::classical_json(q);
  o.report["residual_estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_order_reduction(Run& r) {
  const int n = r.dim(0);
  if (r.opt.order.size() != 2) throw InputError("--order needs m_e,m_psi");
  BiOrder m{static_cast<int>(r.opt.order[0]), static_cast<int>(r.opt.order[1])};
  if (m.m_e != r.opt.order[0] || m.m_psi != r.opt.order[1]) throw InputError("order reductions need integer orders");
  auto l = order_reduction(m, n);
  auto rep = check_sg_estimate(l.base, m, r.opt.max_deriv);
  Outcome o;
  o.report["symbol"] = io::classical_json(l);
  o.report["estimate"] = io::estimate_json(rep);
  o.pass = rep.pass;
  return o;
}

Outcome op_recover_symbol(Run& r) {
  auto a = r.symbol(0);
  const int n = a.dim();
  auto s = r.grid(n);
  std::vector<SymbolSample> pts;
  if (r.docs.size() > 1) {
    pts = r.parse(1, [n](const json& j) {
      std::vector<SymbolSample> v;
      const json& arr = io::get_array(io::field(j, "points", ""), "/points");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string at = "/points/" + std::to_string(i);
        auto x = io::numbers_at(arr[i], "x", at), xi = io::numbers_at(arr[i], "xi", at);
        if (static_cast<int>(x.size()) != n || static_cast<int>(xi.size()) != n)
          throw io::SchemaViolation(at, "sample needs n coordinates in x and xi");
        SymbolSample p;
        for (int d = 0; d < n; ++d) {
          p.x[d] = x[d];
          p.xi[d] = xi[d];
        }
        v.push_back(p);
      }
      return v;
    });
  } else {
    pts = grid_dyadic_samples(s).points;
  }
  auto got = recover_symbol(quantize(a, s), pts, probe_flag(r));
  Tape t(a.base.ast);
  std::vector<cplx> want;
  double worst = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    Point q;
    for (int d = 0; d < n; ++d) {
      q.x[d] = pts[i].x[d];
      q.xi[d] = pts[i].xi[d];
    }
    want.push_back(t(q));
    worst = std::max(worst, rel_err(got[i], want.back()));
  }
  Outcome o;
  o.report["samples"] = pts.size();
  o.report["max_relative_error"] = worst;
  o.pass = worst <= r.tol(1e-3);
  sample_table(o, n, pts, got, want);
  return o;
}

Outcome op_sobolev_norm(Run& r) {
  auto s = r.grid(r.dim(0));
  auto u = r.function(0, s);
  SobolevOrder m;
  if (!r.opt.order.empty()) {
    if (r.opt.order.size() != 2) throw InputError("--order needs m_e,m_psi");
    m = {r.opt.order[0], r.opt.order[1]};
  }
  Outcome o;
  o.report["order"] = {m.m_e, m.m_psi};
  o.report["norm"] = sobolev_norm(u, m);
  return o;
}

Outcome op_fourier_conjugate(Run& r) {
  auto a = r.symbol(0);
  auto c = fourier_conjugate(a.base);
  auto s = r.symmetric_grid(a.dim());
  auto lhs = inverse_fourier_operator(s) * quantize(a, s) * fourier_operator(s);
  double res = battery_residual(lhs, quantize_amplitude(c.amplitude, s), test_battery(s));
  Outcome o;
  o.report["amplitude"] = io::amplitude_json(c.amplitude);
  o.report["order"] = io::order_json(c.order);
  o.report["grid"] = grid_json(s);
  o.report["grid_residual"] = res;
  o.pass = res <= r.tol(1e-8);
  return o;
}

Outcome op_amplitude_reduce(Run& r) {
  auto amp = r.parse(0, [](const json& j) { return io::parse_amplitude(j); });
  const int K = r.trunc(2);
  auto s = r.grid(amp.dim);
  auto Q = quantize_amplitude(amp, s);
  auto bat = battery_or(r, 1, s);
  std::vector<double> res;
  json per = json::array();
  ClassicalSymbol b;
  for (int k = 0; k <= K; ++k) {
    b = amplitude_reduce(amp, k);
    res.push_back(battery_residual(quantize(b, s), Q, bat));
    per.push_back({{"K", k}, {"residual", res.back()}});
  }
  Outcome o;
  o.report["symbol"] = io::classical_json(b);
  o.report["residuals"] = per;
  o.pass = nonincreasing(res);
  o.table.header = {"K", "residual"};
  for (int k = 0; k <= K; ++k) o.table.rows.push_back({double(k), res[k]});
  return o;
}

Outcome op_radial_limit_decomposition(Run& r) {
  auto e = r.symbol(0);
  auto d = radial_limit_decomposition(e.base, r.tol(1e-8));
  Outcome o;
  o.report["c"] = io::cplx_json(d.c);
  o.report["spread"] = d.spread;
  o.report["decay_exponent"] = d.decay_exponent;
  o.report["gradient_decay_order"] = d.gradient_decay_order;
  o.pass = d.spread <= r.tol(1e-8);
  return o;
}

// ---------------------------------------------------------------------------
// scatgeo

Outcome op_radial_compactify(Run& r) {
  auto pts = r.parse(0, [](const json& j) {
    std::vector<std::vector<double>> v;
    const json& a = io::get_array(io::field(j, "points", ""), "/points");
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::string at = "/points/" + std::to_string(i);
      const json& p = io::get_array(a[i], at);
      std::vector<double> x;
      for (std::size_t k = 0; k < p.size(); ++k) x.push_back(io::get_number(p[k], at + "/" + std::to_string(k)));
      if (x.empty()) throw io::SchemaViolation(at, "empty point");
      v.push_back(x);
    }
    return v;
  });
  Outcome o;
  json out = json::array();
  double worst = 0.0;
  for (auto& x : pts) {
    auto c = radial_compactify(x);
    auto back = radial_decompactify(c);
    double err = 0.0, scale = 1.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      err = std::max(err, std::abs(back[k] - x[k]));
      scale = std::max(scale, std::abs(x[k]));
    }
    worst = std::max(worst, err / scale);
    out.push_back({{"rho", c.rho}, {"omega", c.omega}, {"interior", c.interior}, {"origin", c.origin}});
  }
  o.report["points"] = out;
  o.report["roundtrip_error"] = worst;
  o.pass = worst <= r.tol(1e-12);
  return o;
}

Outcome op_jmap(Run& r) {
  auto a = r.symbol(0);
  Outcome o;
  json per = json::object();
  double worst = 0.0;
  for (Face f : {Face::e, Face::psi, Face::psie}) {
    auto d = jmap(a, f);
    auto pl = principal_limit(a.base, f);
    double w = 0.0;
    for (std::size_t i = 0; i < d.samples.size(); ++i) w = std::max(w, std::abs(d.principal_value(i) - pl(d.samples[i])));
    per[face_name(f)] = {{"samples", d.samples.size()}, {"principal_agreement", w}};
    worst = std::max(worst, w);
  }
  o.report["faces"] = per;
  o.pass = worst <= r.tol(1e-6);
  return o;
}

Outcome op_corner_compatibility_check(Run& r) {
  auto a = r.symbol(0);
  auto b = r.docs.size() > 1 ? r.symbol(1) : a;
  double res = corner_compatibility_check(jmap(a, Face::e), jmap(b, Face::psi));
  Outcome o;
  o.report["corner_residual"] = res;
  o.pass = res <= r.tol(1e-6);
  return o;
}

SCTSpec sct_input(const Run& r, std::size_t i) {
  if (r.doc(i).kind == "map") return sct_spec(r.parse(i, [](const json& j) { return io::parse_map(j); }));
  return r.parse(i, [](const json& j) { return io::parse_sct(j); });
}

Outcome op_homogeneous_extension(Run& r) {
  auto spec = sct_input(r, 0);
  const int n = spec.n;
  auto rep = validate_sct(spec);
  Outcome o;
  o.report["sct"] = {{"min_section", rep.min_section}, {"unit_defect", rep.unit_defect}, {"corner", rep.corner()},
                     {"ok", rep.ok}};
  if (!rep.ok) {
    o.pass = false;
    return o;
  }
  OrderReductionData pr = r.docs.size() > 1 ? r.parse(1, [](const json& j) { return io::parse_order_reduction(j); })
                                            : OrderReductionData{norm_x(n), norm_x(n), norm_xi(n), norm_xi(n)};
  auto e = homogeneous_extension(spec, pr);
  auto pts = shell_samples(n, 30, 1.0, 20.0);
  double hom = 0.0;
  for (Face f : {Face::e, Face::psi, Face::psie}) hom = std::max(hom, extension_homogeneity_defect(e, f, pts));
  double red = std::max(order_reduction_defect(e, pr, Face::e, pts), order_reduction_defect(e, pr, Face::psi, pts));
  o.report["extension"] = {{"homogeneity_defect", hom},
                           {"order_reduction_defect", red},
                           {"section_defect_e", e.section_defect_e},
                           {"section_defect_psi", e.section_defect_psi},
                           {"Ce_y", io::expr_list_json(e.Ce_y, io::dims_of(n))},
                           {"Ce_eta", io::expr_list_json(e.Ce_eta, io::dims_of(n))},
                           {"Cpsi_y", io::expr_list_json(e.Cpsi_y, io::dims_of(n))},
                           {"Cpsi_eta", io::expr_list_json(e.Cpsi_eta, io::dims_of(n))}};
  const double tol = r.tol(1e-8);
  o.pass = hom <= tol && red <= tol;
  return o;
}

json generating_json(const GeneratingData& g) {
  json faces = json::object();
  for (auto& f : g.faces)
    faces[face_name(f.face)] = {{"S", io::expr_json(f.S, io::dims_of(g.n, g.theta_dim()))},
                                {"residual", f.residual}};
  return {{"I", g.I}, {"J", g.J}, {"faces", faces}, {"corner_identity", g.corner_identity}};
}

Outcome op_generating_functions(Run& r) {
  auto m = r.parse(0, [](const json& j) { return io::parse_map(j); });
  auto g = generating_functions(graph_data(m));
  Outcome o;
  o.report["generating"] = generating_json(g);
  o.pass = g.max_residual() <= r.tol(1e-8) && g.corner_identity <= r.tol(1e-8);
  return o;
}

Outcome op_phase_from_sct(Run& r) {
  auto m = r.parse(0, [](const json& j) { return io::parse_map(j); });
  auto pc = phase_from_sct(generating_functions(graph_data(m)));
  Outcome o;
  o.report["phase_e"] = io::phase_json(pc.e);
  o.report["phase_psi"] = io::phase_json(pc.psi);
  o.report["I"] = pc.I;
  o.report["stationarity"] = pc.stationarity;
  o.report["compatibility"] = pc.compatibility;
  const double tol = r.tol(1e-8);
  o.pass = pc.stationarity <= tol && pc.compatibility <= tol;
  return o;
}

Outcome op_hamiltonian_from_field(Run& r) {
  struct Field {
    std::vector<Expr> gamma, rho;
    int l = 2;
    Face face = Face::e;
    int n = 1;
  };
  auto in = r.parse(0, [](const json& j) {
    Field f;
    f.n = io::dim_at(j, "");
    const auto d = io::dims_of(f.n);
    if (j.contains("hamiltonian")) {
      auto c = io::parse_expr(j["hamiltonian"], d, "/hamiltonian");
      std::tie(f.gamma, f.rho) = hamilton_field(c, f.n);
    } else {
      f.gamma = io::parse_expr_list(j, "gamma", d, "", f.n);
      f.rho = io::parse_expr_list(j, "rho", d, "", f.n);
    }
    f.l = io::int_or(j, "l", 2, "");
    if (j.contains("face")) f.face = io::parse_face(io::get_string(j["face"], "/face"), "/face");
    return f;
  });
  auto h = hamiltonian_from_field(in.gamma, in.rho, in.l, in.face);
  Outcome o;
  o.report["c"] = io::symbol_json(h.c);
  o.report["closedness"] = h.closedness;
  o.report["roundtrip"] = h.roundtrip;
  o.pass = h.roundtrip <= r.tol(1e-8);
  return o;
}

// ---------------------------------------------------------------------------
// fio

Outcome op_validate_q_phase(Run& r) {
  auto A = r.fio(0);
  auto rep = validate_q_phase(A.phase);
  Outcome o;
  json c = json::array();
  for (auto& k : rep.conditions) c.push_back({{"name", k.name}, {"min", k.min}, {"max", k.max}, {"pass", k.pass}});
  o.report["conditions"] = c;
  o.pass = rep.ok;
  return o;
}

Outcome op_apply_fio(Run& r) {
  auto A = r.fio(0);
  auto v = apply_fio(A, r.function(1, A.grid));
  Outcome o;
  o.report["norm"] = v.norm();
  function_table(o, v);
  return o;
}

Outcome op_fio_adjoint(Run& r) {
  auto A = r.fio(0);
  double d = adjoint_defect(A, test_battery(A.grid));
  Outcome o;
  o.report["adjoint"] = io::fio_json(fio_adjoint(A));
  o.report["pairing_defect"] = d;
  o.pass = d <= r.tol(1e-8);
  return o;
}

Outcome op_compose_type_I_II(Run& r) {
  auto A = r.fio(0), B = r.fio(1);
  auto rec = compose_type_I_II(A, B);
  Outcome o;
  o.report["composed"] = io::fio_json(rec.composed);
  o.report["cancellation"] = rec.cancellation;
  o.report["grid_residual"] = rec.grid_residual;
  o.pass = rec.grid_residual <= r.tol(1e-8);
  return o;
}

Outcome op_fio_parametrix(Run& r) {
  auto A = r.fio(0);
  const int K = r.trunc(2);
  std::vector<double> right, left;
  json per = json::array();
  FIOParametrix last;
  for (int k = 0; k <= K; ++k) {
    last = fio_parametrix(A, k);
    right.push_back(last.residual_right);
    left.push_back(last.residual_left);
    per.push_back({{"K", k}, {"residual_right", last.residual_right}, {"residual_left", last.residual_left}});
  }
  Outcome o;
  o.report["parametrix"] = io::fio_json(last.handle);
  o.report["residuals"] = per;
  o.pass = nonincreasing(right) && nonincreasing(left);
  o.table.header = {"K", "residual_right", "residual_left"};
  for (int k = 0; k <= K; ++k) o.table.rows.push_back({double(k), right[k], left[k]});
  return o;
}

Outcome op_egorov_check(Run& r) {
  auto A = r.fio(0);
  auto P = r.symbol(1);
  CanonicalMap C;
  if (r.docs.size() > 2) {
    C = r.parse(2, [](const json& j) { return io::parse_map(j); });
  } else {
    auto lp = detect_linear_phase(A.phase);
    if (!lp) throw UnsupportedPhase("egorov needs a map file for phases outside the closed-form family");
    C = linear_fio_map(*lp);
  }
  auto rep = egorov_check(A, P, C, std::nullopt, r.tol(kEgorovTolerance), r.trunc(2), probe_flag(r));
  Outcome o;
  o.report["map"] = io::map_json(C);
  o.report["samples"] = rep.samples.size();
  o.report["grid_residual"] = rep.grid_residual;
  o.report["component_residual"] = {{"e", rep.component_residual[0]},
                                    {"psi", rep.component_residual[1]},
                                    {"psie", rep.component_residual[2]}};
  o.report["tolerance"] = rep.tolerance;
  o.pass = rep.ok;
  sample_table(o, A.dim(), rep.samples, rep.recovered, rep.expected);
  return o;
}

Outcome op_order_preservation_probe(Run& r) {
  OpiReport rep;
  json grid;
  if (r.doc(0).kind == "fourier") {
    auto s = r.symmetric_grid(r.dim(0));
    rep = order_preservation_probe(fourier_operator(s), inverse_fourier_operator(s), opi_battery(s.n), probe_flag(r));
    grid = grid_json(s);
  } else {
    auto A = r.fio(0);
    rep = order_preservation_probe(A, opi_battery(A.dim()), probe_flag(r));
    grid = grid_json(A.grid);
  }
  Outcome o;
  json rows = json::array();
  for (auto& w : rep.rows)
    rows.push_back({{"name", w.name},
                    {"order", io::order_json(w.order)},
                    {"own", w.own},
                    {"swapped", w.swapped},
                    {"own_ratio", w.own_ratio},
                    {"swapped_ratio", w.swapped_ratio}});
  o.report["grid"] = grid;
  o.report["rows"] = rows;
  o.report["order_preserving"] = rep.order_preserving;
  o.report["identity_pattern"] = rep.identity_pattern;
  o.report["swap_pattern"] = rep.swap_pattern;
  o.pass = rep.order_preserving;
  o.table.header = {"row", "own", "swapped", "own_ratio", "swapped_ratio"};
  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    auto& w = rep.rows[i];
    o.table.rows.push_back({double(i), double(w.own), double(w.swapped), w.own_ratio, w.swapped_ratio});
  }
  return o;
}

// ---------------------------------------------------------------------------
// Dispatch table: every module operation is reachable from exactly one verb. The first entry of a verb whose
// kinds match the first input is its default; --op selects another entry of the same verb.

struct Entry {
  const char* op;
  const char* module;
  const char* verb;
  std::vector<std::string> kinds;  // accepted kinds of the first input
  Outcome (*fn)(Run&);
};

const std::vector<Entry>& dispatch_table() {
  static const std::vector<Entry> t = {
      {"check_sg_estimate", "symbols", "check-symbol", {"symbol"}, op_check_sg_estimate},
      {"differentiate", "symbols", "check-symbol", {"symbol"}, op_differentiate},
      {"is_elliptic", "symbols", "check-symbol", {"symbol"}, op_is_elliptic},
      {"principal_limit", "symbols", "principal", {"symbol"}, op_principal_limit},
      {"associated_symbol", "symbols", "principal", {"symbol"}, op_associated_symbol},
      {"asymptotic_sum", "symbols", "principal", {"terms"}, op_asymptotic_sum},
      {"leibniz_product", "psdo", "compose", {"symbol"}, op_leibniz_product},
      {"poisson_bracket", "symbols", "compose", {"symbol"}, op_poisson_bracket},
      {"bracket_principal_check", "symbols", "compose", {"symbol"}, op_bracket_principal_check},
      {"weight_multiply", "symbols", "compose", {"symbol"}, op_weight_multiply},
      {"compose_type_I_II", "fio", "compose", {"fio"}, op_compose_type_I_II},
      {"formal_adjoint", "psdo", "adjoint", {"symbol"}, op_formal_adjoint},
      {"fio_adjoint", "fio", "adjoint", {"fio"}, op_fio_adjoint},
      {"parametrix", "psdo", "parametrix", {"symbol"}, op_parametrix},
      {"fio_parametrix", "fio", "parametrix", {"fio"}, op_fio_parametrix},
      {"quantize", "psdo", "quantize-apply", {"symbol"}, op_quantize},
      {"amplitude_reduce", "psdo", "quantize-apply", {"amplitude"}, op_amplitude_reduce},
      {"recover_symbol", "psdo", "recover", {"symbol"}, op_recover_symbol},
      {"sobolev_norm", "psdo", "sobolev-norm", {"function"}, op_sobolev_norm},
      {"order_reduction", "psdo", "sobolev-norm", {"function", "symbol"}, op_order_reduction},
      {"fourier_conjugate", "psdo", "fourier-conj", {"symbol"}, op_fourier_conjugate},
      {"radial_limit_decomposition", "psdo", "radial-split", {"symbol"}, op_radial_limit_decomposition},
      {"radial_compactify", "scatgeo", "compactify", {"points"}, op_radial_compactify},
      {"jmap", "scatgeo", "compactify", {"symbol"}, op_jmap},
      {"corner_compatibility_check", "scatgeo", "compactify", {"symbol"}, op_corner_compatibility_check},
      {"homogeneous_extension", "scatgeo", "sct-validate", {"map", "sct"}, op_homogeneous_extension},
      {"phase_from_sct", "scatgeo", "sct-phase", {"map"}, op_phase_from_sct},
      {"generating_functions", "scatgeo", "sct-phase", {"map"}, op_generating_functions},
      {"hamiltonian_from_field", "scatgeo", "hamiltonian", {"field"}, op_hamiltonian_from_field},
      {"validate_q_phase", "fio", "fio-validate", {"fio"}, op_validate_q_phase},
      {"apply_fio", "fio", "fio-apply", {"fio"}, op_apply_fio},
      {"egorov_check", "fio", "egorov", {"fio"}, op_egorov_check},
      {"order_preservation_probe", "fio", "opi-probe", {"fio", "fourier"}, op_order_preservation_probe},
  };
  return t;
}

const std::vector<std::string> kVerbs = {"check-symbol", "principal",    "compose",      "adjoint",       "parametrix",
                                         "quantize-apply", "recover",    "sobolev-norm", "fourier-conj",  "radial-split",
                                         "compactify",   "sct-validate", "sct-phase",    "hamiltonian",   "fio-validate",
                                         "fio-apply",    "egorov",       "opi-probe"};

const std::vector<std::string> kKinds = {"symbol", "amplitude", "fio", "fourier", "function", "terms",
                                         "points", "map",       "sct", "order-reduction", "field", "samples"};

Doc load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError(path + ": cannot read file");
  std::stringstream ss;
  ss << f.rdbuf();
  Doc d{path, ss.str(), {}, {}};
  try {
    d.j = json::parse(d.text);
  } catch (const json::parse_error& e) {
    int line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, d.text.size()) && i + 1 < e.byte; ++i)
      if (d.text[i] == '\n') ++line;
    throw InputError(path + ":" + std::to_string(line) + ": JSON parse error: " + e.what());
  }
  if (!d.j.is_object()) throw InputError(path + ":1: /: descriptor must be a JSON object");
  if (d.j.contains("kind")) {
    if (!d.j["kind"].is_string()) throw InputError(path + ":" + std::to_string(io::line_of(io::line_map(d.text), "/kind")) + ": /kind: expected a string");
    d.kind = d.j["kind"].get<std::string>();
    if (std::find(kKinds.begin(), kKinds.end(), d.kind) == kKinds.end())
      throw InputError(path + ":" + std::to_string(io::line_of(io::line_map(d.text), "/kind")) + ": /kind: unknown descriptor kind '" + d.kind + "'");
  } else if (d.j.contains("ast") && d.j.contains("order")) {
    d.kind = "symbol";
  } else {
    throw InputError(path + ":1: /: descriptor needs a 'kind'");
  }
  return d;
}

void write_csv(const std::string& path, const Table& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError(path + ": cannot write file");
  for (std::size_t i = 0; i < t.header.size(); ++i) f << (i ? "," : "") << t.header[i];
  f << "\n";
  char buf[32];
  for (auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", row[i]);
      f << (i ? "," : "") << buf;
    }
    f << "\n";
  }
}

std::string csv_path(const std::string& out) {
  auto dot = out.rfind('.');
  auto slash = out.rfind('/');
  if (dot != std::string::npos && (slash == std::string::npos || dot > slash)) return out.substr(0, dot) + ".csv";
  return out + ".csv";
}

int run_verb(const std::string& verb, const Options& opt) {
  Run r{opt, {}};
  if (opt.N || opt.L) r.grid(1);
  for (auto& p : opt.inputs) r.docs.push_back(load(p));
  if (r.docs.empty()) throw InputError(verb + ": needs at least one input file");

  const Entry* e = nullptr;
  for (auto& t : dispatch_table()) {
    if (verb != t.verb) continue;
    if (!opt.op.empty()) {
      if (opt.op == t.op) e = &t;
    } else if (std::find(t.kinds.begin(), t.kinds.end(), r.docs[0].kind) != t.kinds.end()) {
      e = &t;
      break;
    }
  }
  if (!e) {
    if (!opt.op.empty()) throw InputError(verb + ": operation '" + opt.op + "' does not belong to this verb");
    throw InputError(opt.inputs[0] + ":1: /kind: verb " + verb + " does not accept a '" + r.docs[0].kind + "' descriptor");
  }
  if (std::find(e->kinds.begin(), e->kinds.end(), r.docs[0].kind) == e->kinds.end())
    throw InputError(opt.inputs[0] + ":1: /kind: operation " + e->op + " does not accept a '" + r.docs[0].kind +
                     "' descriptor");

  Outcome o;
  try {
    o = e->fn(r);
  } catch (const InputError&) {
    throw;
  } catch (const std::exception& ex) {
    const auto* err = dynamic_cast<const Error*>(&ex);
    o = Outcome{};
    o.pass = false;
    o.report["error"] = {{"kind", err ? err->kind() : "InternalError"}, {"message", ex.what()}};
  }
  o.report["verb"] = verb;
  o.report["operation"] = e->op;
  o.report["module"] = e->module;
  o.report["pass"] = o.pass;
  if (!opt.out.empty()) {
    std::ofstream f(opt.out, std::ios::binary);
    if (!f) throw InputError(opt.out + ": cannot write file");
    f << o.report.dump(2) << "\n";
    if (!o.table.header.empty()) write_csv(csv_path(opt.out), o.table);
  }
  if (opt.json_stdout)
    std::cout << o.report.dump(2) << "\n";
  else
    std::cout << verb << " " << e->op << ": " << (o.pass ? "PASS" : "FAIL")
              << (o.report.contains("error") ? " (" + o.report["error"]["message"].get<std::string>() + ")" : "") << "\n";
  return o.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sgcalc: SG symbol calculus, scattering geometry and FIO checks"};
  app.require_subcommand(0, 1);
  app.fallthrough();
  Options opt;
  bool list_ops = false;
  app.add_flag("--list-ops", list_ops, "Print the operation dispatch table as JSON");
  app.add_option("--grid", opt.N, "Grid size N per axis (power of two)");
  app.add_option("--box", opt.L, "Box half-width L");
  app.add_option("--tol", opt.tol, "Pass tolerance override");
  app.add_option("--trunc", opt.trunc, "Truncation depth K");
  app.add_option("--out", opt.out, "Report path (JSON); tables go next to it as .csv");
  app.add_flag("--json", opt.json_stdout, "Print the machine report to stdout");
  app.add_option("--op", opt.op, "Operation within the verb");
  app.add_option("--face", opt.face, "Face e, psi or psie");
  app.add_option("--order", opt.order, "Order m_e,m_psi")->delimiter(',')->allow_extra_args(false);
  app.add_option("--alpha", opt.alpha, "x multi-index")->delimiter(',')->allow_extra_args(false);
  app.add_option("--beta", opt.beta, "xi multi-index")->delimiter(',')->allow_extra_args(false);
  app.add_option("--weight", opt.weight, "Weight order m_e,m_psi")->delimiter(',')->allow_extra_args(false);
  app.add_option("--probe", opt.probe, "Symbol recovery probe: plane or windowed");
  app.add_option("--max-deriv", opt.max_deriv, "Largest derivative order in estimate checks");
  std::map<std::string, CLI::App*> subs;
  for (auto& v : kVerbs) {
    auto* s = app.add_subcommand(v);
    s->add_option("inputs", opt.inputs, "Descriptor files")->required();
    subs[v] = s;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "sgcalc: " << e.what() << "\n";
    return 2;
  }

  if (list_ops) {
    json t = json::array();
    for (auto& e : dispatch_table())
      t.push_back({{"operation", e.op}, {"module", e.module}, {"verb", e.verb}, {"kinds", e.kinds}});
    std::cout << t.dump(2) << "\n";
    return 0;
  }
  std::string verb;
  for (auto& [v, s] : subs)
    if (s->parsed()) verb = v;
  if (verb.empty()) {
    std::cerr << "sgcalc: a verb is required\n" << app.help();
    return 2;
  }
  try {
    return run_verb(verb, opt);
  } catch (const InputError& e) {
    std::cerr << "sgcalc: " << e.what() << "\n";
    return 2;
  }
}
