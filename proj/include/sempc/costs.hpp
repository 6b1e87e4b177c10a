#pragma once

#include <sempc/core.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>

namespace sempc {

/// Stage cost L_t(x, u) and terminal cost Phi(x) with optional gradients.
///
/// When a gradient callback is empty the solver falls back to central finite
/// differences on the value.
struct CostModel {
  std::function<double(const Vector&, const Vector&, int)> stage;
  std::function<double(const Vector&)> terminal;
  std::function<void(const Vector&, const Vector&, int, Vector&, Vector&)> stage_gradient;
  std::function<void(const Vector&, Vector&)> terminal_gradient;
  /// Lipschitz constant of the costs in x (Euclidean), if they have one.
  std::optional<double> state_lipschitz;
  std::string description;
};

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// L_t(x,u) = a ||x||_1 + b ||u||_1, Phi(x) = a ||x||_2.
///
/// ||x||_1 <= sqrt(n) ||x||_2, so both costs are (a sqrt(n))-Lipschitz in x.
inline CostModel l1_cost(double a, double b, int state_dim) {
  require(a >= 0.0 && b >= 0.0, "l1 cost weights must be >= 0");
  CostModel c;
  c.stage = [a, b](const Vector& x, const Vector& u, int) { return a * x.lpNorm<1>() + b * u.lpNorm<1>(); };
  c.terminal = [a](const Vector& x) { return a * x.norm(); };
  c.stage_gradient = [a, b](const Vector& x, const Vector& u, int, Vector& gx, Vector& gu) {
    gx = a * x.unaryExpr(&sign0);
    gu = b * u.unaryExpr(&sign0);
  };
  c.terminal_gradient = [a](const Vector& x, Vector& g) {
    const double r = x.norm();
    g = r > 0.0 ? Vector(a * x / r) : Vector(Vector::Zero(x.size()));
  };
  c.state_lipschitz = a * std::sqrt(static_cast<double>(state_dim));
  c.description = "l1(a=" + std::to_string(a) + ",b=" + std::to_string(b) + ")";
  return c;
}

/// L_t(x,u) = x'Qx + u'Ru, Phi(x) = x'Q_f x.
inline CostModel quadratic_cost(const Matrix& q, const Matrix& r, const Matrix& qf) {
  require(q.rows() == q.cols() && qf.rows() == qf.cols() && q.rows() == qf.rows(), "quadratic cost: bad Q/Qf");
  require(r.rows() == r.cols(), "quadratic cost: R must be square");
  CostModel c;
  c.stage = [q, r](const Vector& x, const Vector& u, int) { return x.dot(q * x) + u.dot(r * u); };
  c.terminal = [qf](const Vector& x) { return x.dot(qf * x); };
  c.stage_gradient = [q, r](const Vector& x, const Vector& u, int, Vector& gx, Vector& gu) {
    gx = (q + q.transpose()) * x;
    gu = (r + r.transpose()) * u;
  };
  c.terminal_gradient = [qf](const Vector& x, Vector& g) { g = (qf + qf.transpose()) * x; };
  c.description = "quadratic";
  return c;
}

}  // namespace sempc
