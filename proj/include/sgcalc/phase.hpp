#pragma once

// Phase pairs f(x, theta) + g(y, theta).

#include <vector>

#include "sgcalc/expr.hpp"

namespace sgcalc {

enum class PhaseClass { Q, Q_gen };

inline const char* phase_class_name(PhaseClass c) { return c == PhaseClass::Q ? "Q" : "Q_gen"; }

struct PhasePair {
  SymbolExpr f;  // x block and theta (xi block)
  SymbolExpr g;  // y block and theta
  int theta_dim = 1;
  std::vector<int> regular_split;  // positions of the regular variables inside theta
  PhaseClass cls = PhaseClass::Q;

  int dim() const { return f.dim; }
  Expr phase() const { return f.ast + g.ast; }

  static PhasePair standard(int n) {
    std::vector<Expr> fx, gy;
    for (int i = 0; i < n; ++i) {
      fx.push_back(Expr::x(i) * Expr::xi(i));
      gy.push_back(-(Expr::y(i) * Expr::xi(i)));
    }
    PhasePair p;
    p.f = SymbolExpr{sum(fx), n, BiOrder::diag(1), n};
    p.g = SymbolExpr{sum(gy), n, BiOrder::diag(1), n};
    p.theta_dim = n;
    for (int i = 0; i < n; ++i) p.regular_split.push_back(i);
    return p;
  }
};

}  // namespace sgcalc
