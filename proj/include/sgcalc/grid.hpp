#pragma once

// Periodic FFT grids, grid functions and matrix-free grid operators.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <thread>
#include <tuple>
#include <vector>

#include "sgcalc/expr.hpp"
#include "sgcalc/parallel.hpp"

namespace sgcalc {

// x_j = -L + j dx, dx = 2L/N; xi_k = (k - N/2) pi/L.
struct GridSpec {
  int n = 1;
  double L = 20.0;
  int N = 512;

  double dx() const { return 2.0 * L / N; }
  double dxi() const { return std::numbers::pi / L; }
  double x(int j) const { return -L + j * dx(); }
  double xi(int k) const { return (k - N / 2) * dxi(); }
  double xi_max() const { return std::numbers::pi / dx(); }
  std::size_t total() const { return n == 1 ? std::size_t(N) : std::size_t(N) * N; }

  // multi-index of flat position (row-major, axis 0 slowest)
  std::array<int, 2> index(std::size_t flat) const {
    if (n == 1) return {int(flat), 0};
    return {int(flat / N), int(flat % N)};
  }
  void point_x(std::size_t flat, double* out) const {
    auto id = index(flat);
    for (int i = 0; i < n; ++i) out[i] = x(id[i]);
  }
  void point_xi(std::size_t flat, double* out) const {
    auto id = index(flat);
    for (int i = 0; i < n; ++i) out[i] = xi(id[i]);
  }

  // dx = dxi, so the discrete Fourier transform maps the grid to itself.
  static GridSpec symmetric(int n, int N) { return {n, std::sqrt(std::numbers::pi * N / 2.0), N}; }

  static GridSpec standard(int n) { return n == 1 ? GridSpec{1, 20.0, 512} : GridSpec{2, 10.0, 64}; }

  bool operator==(const GridSpec& o) const { return n == o.n && L == o.L && N == o.N; }

  void validate() const {
    if (n < 1 || n > 2) throw DomainError("grid dimension must be 1 or 2");
    if (N < 4 || (N & (N - 1)) != 0) throw DomainError("grid size must be a power of two");
    if (!(L > 0)) throw DomainError("box half-width must be positive");
  }
};

struct GridFunction {
  GridSpec spec;
  std::vector<cplx> v;

  GridFunction() = default;
  explicit GridFunction(const GridSpec& s) : spec(s), v(s.total()) {}
  GridFunction(const GridSpec& s, std::vector<cplx> vals) : spec(s), v(std::move(vals)) {}

  static GridFunction sample(const GridSpec& s, const std::function<cplx(const double*)>& f) {
    GridFunction g(s);
    double p[2] = {0, 0};
    for (std::size_t j = 0; j < g.v.size(); ++j) {
      s.point_x(j, p);
      g.v[j] = f(p);
    }
    return g;
  }

  double norm() const {
    double s = 0.0;
    for (auto& c : v) s += std::norm(c);
    return std::sqrt(s * std::pow(spec.dx(), spec.n));
  }

  // L2 norm over the inner half-box |x_i| <= L/2.
  double inner_norm() const {
    double s = 0.0, p[2];
    for (std::size_t j = 0; j < v.size(); ++j) {
      spec.point_x(j, p);
      bool in = true;
      for (int i = 0; i < spec.n; ++i) in = in && std::abs(p[i]) <= spec.L / 2;
      if (in) s += std::norm(v[j]);
    }
    return std::sqrt(s * std::pow(spec.dx(), spec.n));
  }

  GridFunction& operator+=(const GridFunction& o) {
    for (std::size_t j = 0; j < v.size(); ++j) v[j] += o.v[j];
    return *this;
  }
  GridFunction& operator-=(const GridFunction& o) {
    for (std::size_t j = 0; j < v.size(); ++j) v[j] -= o.v[j];
    return *this;
  }
  GridFunction& operator*=(cplx c) {
    for (auto& z : v) z *= c;
    return *this;
  }
  friend GridFunction operator+(GridFunction a, const GridFunction& b) { return a += b; }
  friend GridFunction operator-(GridFunction a, const GridFunction& b) { return a -= b; }
  friend GridFunction operator*(cplx c, GridFunction a) { return a *= c; }
};

inline cplx inner_product(const GridFunction& a, const GridFunction& b) {
  cplx s = 0.0;
  for (std::size_t j = 0; j < a.v.size(); ++j) s += a.v[j] * std::conj(b.v[j]);
  return s * std::pow(a.spec.dx(), a.spec.n);
}

// ---------------------------------------------------------------------------
// FFTW wrapper. Plans are created once per (n, N, sign) under a lock; execution uses the new-array interface.

class FFT {
 public:
  static void execute(const GridSpec& s, std::vector<cplx>& data, int sign) {
    fftw_plan p = plan(s, sign);
    auto* d = reinterpret_cast<fftw_complex*>(data.data());
    fftw_execute_dft(p, d, d);
  }

 private:
  static fftw_plan plan(const GridSpec& s, int sign) {
    static std::mutex m;
    static std::map<std::tuple<int, int, int>, fftw_plan> plans;
    std::lock_guard lk(m);
    auto key = std::make_tuple(s.n, s.N, sign);
    if (auto it = plans.find(key); it != plans.end()) return it->second;
    std::vector<cplx> tmp(s.total());
    auto* d = reinterpret_cast<fftw_complex*>(tmp.data());
    int dims[2] = {s.N, s.N};
    fftw_plan p = fftw_plan_dft(s.n, dims, d, d, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans.emplace(key, p);
    return p;
  }
};

inline double parity(const GridSpec& s, std::size_t flat, bool dual) {
  auto id = s.index(flat);
  int e = 0;
  for (int i = 0; i < s.n; ++i) e += dual ? id[i] - s.N / 2 : id[i];
  return (e & 1) ? -1.0 : 1.0;
}

// u_hat(xi_k) = sum_j exp(-i x_j xi_k) u_j dx^n.
inline std::vector<cplx> forward_transform(const GridFunction& u) {
  const auto& s = u.spec;
  std::vector<cplx> d(u.v);
  for (std::size_t j = 0; j < d.size(); ++j) d[j] *= parity(s, j, false);
  FFT::execute(s, d, FFTW_FORWARD);
  const double w = std::pow(s.dx(), s.n);
  for (std::size_t k = 0; k < d.size(); ++k) d[k] *= parity(s, k, true) * w;
  return d;
}

// u_j = sum_k exp(i x_j xi_k) u_hat_k (dxi / 2pi)^n.
inline GridFunction inverse_transform(const GridSpec& s, std::vector<cplx> d) {
  for (std::size_t k = 0; k < d.size(); ++k) d[k] *= parity(s, k, true);
  FFT::execute(s, d, FFTW_BACKWARD);
  const double w = std::pow(s.dxi() / (2.0 * std::numbers::pi), s.n);
  for (std::size_t j = 0; j < d.size(); ++j) d[j] *= parity(s, j, false) * w;
  return GridFunction(s, std::move(d));
}

// ---------------------------------------------------------------------------
// Matrix-free operators.

struct GridOperator {
  GridSpec spec;
  std::function<GridFunction(const GridFunction&)> apply;

  GridFunction operator()(const GridFunction& u) const {
    if (!(u.spec == spec)) throw DomainError("grid mismatch");
    return apply(u);
  }

  // Dense matrix (column j = image of e_j), only for small grids.
  std::vector<std::vector<cplx>> dense() const {
    if (spec.total() > 1024) throw DomainError("dense materialisation needs N^n <= 1024");
    std::vector<std::vector<cplx>> cols;
    for (std::size_t j = 0; j < spec.total(); ++j) {
      GridFunction e(spec);
      e.v[j] = 1.0;
      cols.push_back(apply(e).v);
    }
    return cols;
  }

  static GridOperator identity(const GridSpec& s) {
    return {s, [](const GridFunction& u) { return u; }};
  }
};

inline GridOperator compose(const GridOperator& a, const GridOperator& b) {
  if (!(a.spec == b.spec)) throw DomainError("grid mismatch");
  return {a.spec, [a, b](const GridFunction& u) { return a.apply(b.apply(u)); }};
}

inline GridOperator operator*(const GridOperator& a, const GridOperator& b) { return compose(a, b); }

inline GridOperator operator-(const GridOperator& a, const GridOperator& b) {
  return {a.spec, [a, b](const GridFunction& u) { return a.apply(u) - b.apply(u); }};
}

inline GridOperator operator+(const GridOperator& a, const GridOperator& b) {
  return {a.spec, [a, b](const GridFunction& u) { return a.apply(u) + b.apply(u); }};
}

// Discrete Fourier transform as an operator on the symmetric grid (xi_k identified with x_k).
inline GridOperator fourier_operator(const GridSpec& s) {
  if (std::abs(s.dx() - s.dxi()) > 1e-12 * s.dx()) throw DomainError("Fourier operator needs the symmetric grid");
  return {s, [s](const GridFunction& u) { return GridFunction(s, forward_transform(u)); }};
}

inline GridOperator inverse_fourier_operator(const GridSpec& s) {
  if (std::abs(s.dx() - s.dxi()) > 1e-12 * s.dx()) throw DomainError("Fourier operator needs the symmetric grid");
  return {s, [s](const GridFunction& u) { return inverse_transform(s, u.v); }};
}

// ---------------------------------------------------------------------------
// Test battery: Hermite functions h0..h5, shifted Gaussians, modulated Gaussians.

inline std::vector<GridFunction> test_battery(const GridSpec& s) {
  std::vector<std::function<double(double)>> prof;
  for (int k = 0; k <= 5; ++k) {
    prof.push_back([k](double t) {
      // physicists' Hermite recursion, normalised
      double h0 = 1.0, h1 = 2.0 * t, hk = k == 0 ? h0 : h1;
      for (int j = 2; j <= k; ++j) {
        hk = 2.0 * t * h1 - 2.0 * (j - 1) * h0;
        h0 = h1;
        h1 = hk;
      }
      double nrm = std::sqrt(std::pow(2.0, k) * std::tgamma(k + 1.0) * std::sqrt(std::numbers::pi));
      return hk * std::exp(-t * t / 2) / nrm;
    });
  }
  std::vector<GridFunction> out;
  auto lift = [&](const std::function<cplx(const double*)>& f) { out.push_back(GridFunction::sample(s, f)); };
  for (auto& h : prof) {
    lift([&, n = s.n](const double* p) {
      double v = h(p[0]);
      if (n == 2) v *= std::exp(-p[1] * p[1] / 2);
      return cplx(v);
    });
  }
  for (double c : {-3.0, -1.5, 1.5, 3.0}) {
    lift([c, n = s.n](const double* p) {
      double r2 = (p[0] - c) * (p[0] - c) + (n == 2 ? p[1] * p[1] : 0.0);
      return cplx(std::exp(-r2 / 2));
    });
  }
  for (double k : {-2.0, 2.0}) {
    lift([k, n = s.n](const double* p) {
      double r2 = p[0] * p[0] + (n == 2 ? p[1] * p[1] : 0.0);
      return std::exp(-r2 / 2) * std::exp(cplx(0, k * p[0]));
    });
  }
  return out;
}

// max over the battery of ||(A - B)u||_inner / ||u||.
inline double battery_residual(const GridOperator& A, const GridOperator& B, const std::vector<GridFunction>& bat) {
  double worst = 0.0;
  for (const auto& u : bat) worst = std::max(worst, (A(u) - B(u)).inner_norm() / u.norm());
  return worst;
}

}  // namespace sgcalc
