#pragma once

#include <sempc/core.hpp>
#include <sempc/costs.hpp>
#include <sempc/geometry.hpp>
#include <sempc/noise.hpp>
#include <sempc/sim.hpp>
#include <sempc/systems.hpp>
#include <sempc/tube.hpp>

#include <Eigen/Cholesky>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace sempc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Ball {x : ||(x - c)_dims||_W <= radius}. An empty `dims` means all
/// coordinates; an empty `weight` means the Euclidean norm.
struct TerminalSet {
  Vector center;
  double radius = 1.0;
  std::vector<int> dims;
  Matrix weight;

  [[nodiscard]] std::vector<int> active_dims(int state_dim) const {
    if (!dims.empty()) return dims;
    std::vector<int> all(static_cast<std::size_t>(state_dim));
    for (int i = 0; i < state_dim; ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
  }

  [[nodiscard]] Vector offset(const Vector& x) const {
    const auto idx = active_dims(static_cast<int>(x.size()));
    Vector d(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const int j = idx[i];
      d[static_cast<Eigen::Index>(i)] = x[j] - (center.size() == x.size() ? center[j] : center[static_cast<Eigen::Index>(i)]);
    }
    return d;
  }

  [[nodiscard]] double distance(const Vector& x) const {
    const Vector d = offset(x);
    return weight.size() == 0 ? d.norm() : std::sqrt(std::max(0.0, d.dot(weight * d)));
  }

  /// Gradient of distance() lifted to the full state.
  [[nodiscard]] Vector distance_gradient(const Vector& x) const {
    const auto idx = active_dims(static_cast<int>(x.size()));
    const Vector d = offset(x);
    const double dist = distance(x);
    Vector g = Vector::Zero(x.size());
    if (dist <= 0.0) return g;
    const Vector local = weight.size() == 0 ? Vector(d / dist) : Vector(weight * d / dist);
    for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] = local[static_cast<Eigen::Index>(i)];
    return g;
  }

  [[nodiscard]] bool contains(const Vector& x) const { return distance(x) <= radius; }

  void validate(int state_dim) const {
    require(std::isfinite(radius) && radius > 0.0, "terminal set radius must be positive");
    const auto idx = active_dims(state_dim);
    for (int j : idx) require(j >= 0 && j < state_dim, "terminal set dims out of range");
    require(center.size() == state_dim || center.size() == static_cast<Eigen::Index>(idx.size()),
            "terminal set center has the wrong dimension");
    if (weight.size() != 0) {
      const auto k = static_cast<Eigen::Index>(idx.size());
      require(weight.rows() == k && weight.cols() == k, "terminal set weight has the wrong shape");
      require((weight - weight.transpose()).cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + weight.cwiseAbs().maxCoeff()),
              "terminal set weight must be symmetric");
      Eigen::LLT<Matrix> llt(weight);
      require(llt.info() == Eigen::Success, "terminal set weight must be positive definite");
    }
  }
};

enum class GradientMode { finite_difference, analytic_if_available };

struct SolverConfig {
  int max_iterations = 300;  ///< total projected-gradient iterations per solve
  double penalty_weight = 100.0;
  double penalty_growth = 10.0;
  int max_penalty_updates = 6;
  double armijo = 1e-4;
  double backtrack = 0.5;
  int max_backtracks = 40;
  GradientMode gradient_mode = GradientMode::analytic_if_available;
  double fd_step = 1e-6;
  double convergence_tol = 1e-7;
  /// Return the shifted previous solution when the optimizer does not verify.
  bool restoration = true;
  /// Constraint tightening used inside the penalty (not in verification).
  double constraint_buffer = 1e-3;

  void validate() const {
    require(max_iterations >= 0, "solver max_iterations must be >= 0");
    require(penalty_weight > 0.0, "solver penalty_weight must be positive");
    require(penalty_growth > 1.0, "solver penalty_growth must be > 1");
    require(max_penalty_updates >= 0, "solver max_penalty_updates must be >= 0");
    require(armijo > 0.0 && armijo < 1.0, "solver armijo must lie in (0, 1)");
    require(backtrack > 0.0 && backtrack < 1.0, "solver backtrack must lie in (0, 1)");
    require(max_backtracks >= 1, "solver max_backtracks must be >= 1");
    require(fd_step > 0.0, "solver fd_step must be positive");
    require(convergence_tol > 0.0, "solver convergence_tol must be positive");
    require(constraint_buffer >= 0.0, "solver constraint_buffer must be >= 0");
  }
};

struct MpcConfig {
  int window = 20;
  TerminalSet terminal_set;
  /// Input that keeps the terminal set invariant (clamped into the input set).
  std::function<Vector(const Vector&)> terminal_controller;
  CostModel costs;
  SolverConfig solver;
  /// Warm start for t = 0 (zeros when empty).
  std::vector<Vector> initial_guess;
  /// Off for the unconstrained baseline: eroded-set constraints are dropped.
  bool enforce_safety = true;

  void validate(const Plant& plant) const {
    require(window >= 1, "mpc window must be >= 1");
    terminal_set.validate(plant.state_dim());
    require(static_cast<bool>(terminal_controller), "mpc terminal_controller must be set");
    require(static_cast<bool>(costs.stage) && static_cast<bool>(costs.terminal), "mpc costs must be set");
    solver.validate();
  }
};

/// Zero MPC input: the plant's built-in stabilizer acts alone.
inline std::function<Vector(const Vector&)> zero_input_controller(int input_dim) {
  return [input_dim](const Vector&) { return Vector(Vector::Zero(input_dim)); };
}

// ---------------------------------------------------------------------------
// Solutions and errors
// ---------------------------------------------------------------------------

struct MpcSolution {
  std::vector<Vector> inputs;             // u_{t+k|t}, k = 0..w-1
  std::vector<Vector> predicted_ce;       // z_{t+k|t} from X_t, k = 0..w
  std::vector<Vector> predicted_nominal;  // x~_{t+k|t} from x_t, k = 0..w
  double objective = 0.0;
  bool feasible = false;
  bool used_fallback = false;
  int time = 0;
  int iterations = 0;
  /// Merit values of accepted iterates, one vector per penalty weight.
  std::vector<std::vector<double>> merit_history;
};

struct ConstraintCheck {
  bool ok = true;
  int k = -1;
  std::string constraint;
  double margin = 0.0;  // slack; negative when violated
};

class InfeasibleAtStep : public Error {
 public:
  InfeasibleAtStep(int t, ConstraintCheck check)
      : Error("no feasible MPC solution at t=" + std::to_string(t) + ": " + check.constraint + " violated at k=" +
              std::to_string(check.k) + " (slack " + std::to_string(check.margin) + ")"),
        t_(t),
        check_(std::move(check)) {}

  [[nodiscard]] int time() const { return t_; }
  [[nodiscard]] int k() const { return check_.k; }
  [[nodiscard]] const std::string& constraint() const { return check_.constraint; }
  [[nodiscard]] double margin() const { return check_.margin; }
  [[nodiscard]] const std::shared_ptr<ClosedLoopTrace>& partial_trace() const { return partial_; }
  void attach_trace(ClosedLoopTrace tr) { partial_ = std::make_shared<ClosedLoopTrace>(std::move(tr)); }

 private:
  int t_;
  ConstraintCheck check_;
  std::shared_ptr<ClosedLoopTrace> partial_;
};

struct ControllerState {
  int time = 0;
  Vector nominal_state;
  std::optional<MpcSolution> last_solution;
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

inline int effective_window(const MpcConfig& config, int t, int horizon) {
  return std::min(config.window, horizon - t);
}

inline std::vector<Vector> rollout(const Plant& plant, const Vector& x0, const std::vector<Vector>& inputs) {
  std::vector<Vector> xs;
  xs.reserve(inputs.size() + 1);
  xs.push_back(x0);
  for (const auto& u : inputs) xs.push_back(plant.evaluate(xs.back(), u));
  return xs;
}

inline double objective_value(const MpcConfig& config, int t, const std::vector<Vector>& z,
                              const std::vector<Vector>& inputs) {
  double j = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) j += config.costs.stage(z[k], inputs[k], t + static_cast<int>(k));
  return j + config.costs.terminal(z.back());
}

/// Exact check of the eroded-set and terminal constraints on a nominal
/// prediction x~_{t+k|t}, k = 0..w.
inline ConstraintCheck check_constraints(const SafeSet& safe_set, const TubeSchedule& schedule,
                                         const MpcConfig& config, int t, const std::vector<Vector>& nominal,
                                         const Box* input_set = nullptr, const std::vector<Vector>* inputs = nullptr) {
  if (input_set && inputs) {
    for (std::size_t k = 0; k < inputs->size(); ++k) {
      if (!input_set->contains((*inputs)[k])) return {false, static_cast<int>(k), "input_set", -1.0};
    }
  }
  if (config.enforce_safety) {
    for (std::size_t k = 0; k < nominal.size(); ++k) {
      const double slack = signed_margin(safe_set, nominal[k]) - schedule.at(t + static_cast<int>(k));
      if (!(slack > 0.0)) return {false, static_cast<int>(k), "eroded_safe_set", slack};
    }
  }
  const double tslack = config.terminal_set.radius - config.terminal_set.distance(nominal.back());
  if (!(tslack >= 0.0)) return {false, static_cast<int>(nominal.size()) - 1, "terminal_set", tslack};
  return {};
}

/// Sliding-window candidate for time t+1 built from a solution at time t:
/// drop the first input and append terminal-controller inputs until the
/// window for t+1 is filled.
inline std::vector<Vector> shifted_candidate(const Plant& plant, const MpcConfig& config, const MpcSolution& sol,
                                             int horizon) {
  const int next_t = sol.time + 1;
  const int w = std::max(0, effective_window(config, next_t, horizon));
  std::vector<Vector> cand(sol.inputs.begin() + std::min<std::ptrdiff_t>(1, std::ssize(sol.inputs)),
                           sol.inputs.end());
  if (static_cast<int>(cand.size()) > w) cand.resize(static_cast<std::size_t>(w));
  Vector x = sol.predicted_nominal.back();
  while (static_cast<int>(cand.size()) < w) {
    Vector u = plant.input_set().clamp(config.terminal_controller(x));
    x = plant.evaluate(x, u);
    cand.push_back(std::move(u));
  }
  return cand;
}

namespace detail {

struct Workspace {
  std::vector<Vector> z;
  std::vector<Vector> xn;
};

inline std::vector<Vector> clamp_all(const Box& box, std::vector<Vector> us) {
  for (auto& u : us) u = box.clamp(u);
  return us;
}

class PenaltyProblem {
 public:
  PenaltyProblem(const Plant& plant, const SafeSet& safe_set, const TubeSchedule& schedule, const MpcConfig& config,
                 int t, const Vector& measured, const Vector& nominal)
      : plant_(plant),
        safe_set_(safe_set),
        schedule_(schedule),
        config_(config),
        t_(t),
        measured_(measured),
        nominal_(nominal),
        shared_start_(measured.size() == nominal.size() && measured == nominal) {}

  double mu = 1.0;

  [[nodiscard]] double merit(const std::vector<Vector>& us) const {
    const auto z = rollout(plant_, measured_, us);
    const auto xn = shared_start_ ? z : rollout(plant_, nominal_, us);
    return objective_value(config_, t_, z, us) + mu * violation(xn);
  }

  [[nodiscard]] double violation(const std::vector<Vector>& xn) const {
    double v = 0.0;
    const double buf = config_.solver.constraint_buffer;
    if (config_.enforce_safety) {
      for (std::size_t k = 1; k < xn.size(); ++k) {
        const double r = schedule_.at(t_ + static_cast<int>(k)) + buf;
        for (const auto& c : clearances(safe_set_, xn[k])) {
          const double s = r - c.value;
          if (s > 0.0) v += s * s;
        }
      }
    }
    const auto& ts = config_.terminal_set;
    const double s = ts.distance(xn.back()) - (ts.radius - std::min(buf, 0.01 * ts.radius));
    if (s > 0.0) v += s * s;
    return v;
  }

  /// Gradient of merit() by adjoint sweeps over both predictions.
  [[nodiscard]] std::vector<Vector> gradient(const std::vector<Vector>& us) const {
    if (config_.solver.gradient_mode == GradientMode::finite_difference) return fd_gradient(us);
    const auto w = us.size();
    const auto z = rollout(plant_, measured_, us);
    const auto xn = shared_start_ ? z : rollout(plant_, nominal_, us);
    std::vector<Vector> g(w);
    const int n = plant_.state_dim();

    // objective along z
    Vector lambda(n);
    terminal_grad(z.back(), lambda);
    Vector gx, gu;
    std::vector<Plant::Jacobians> jz(w);
    for (std::size_t k = 0; k < w; ++k) jz[k] = jacobian(z[k], us[k]);
    for (std::size_t kk = w; kk-- > 0;) {
      stage_grad(z[kk], us[kk], t_ + static_cast<int>(kk), gx, gu);
      g[kk] = gu + jz[kk].input.transpose() * lambda;
      lambda = gx + jz[kk].state.transpose() * lambda;
    }

    // penalty along x~
    std::vector<Plant::Jacobians> jxs;
    const std::vector<Plant::Jacobians>* jx = &jz;
    if (!shared_start_) {
      jxs.resize(w);
      for (std::size_t k = 0; k < w; ++k) jxs[k] = jacobian(xn[k], us[k]);
      jx = &jxs;
    }
    Vector mu_lambda = penalty_grad(xn, w);
    for (std::size_t kk = w; kk-- > 0;) {
      g[kk] += (*jx)[kk].input.transpose() * mu_lambda;
      mu_lambda = (*jx)[kk].state.transpose() * mu_lambda;
      if (kk > 0) mu_lambda += penalty_grad(xn, kk);
    }
    return g;
  }

 private:
  [[nodiscard]] Vector penalty_grad(const std::vector<Vector>& xn, std::size_t k) const {
    const int n = plant_.state_dim();
    Vector g = Vector::Zero(n);
    const double buf = config_.solver.constraint_buffer;
    if (config_.enforce_safety) {
      const double r = schedule_.at(t_ + static_cast<int>(k)) + buf;
      for (const auto& c : clearances(safe_set_, xn[k])) {
        const double s = r - c.value;
        if (s > 0.0) g -= 2.0 * s * c.gradient;
      }
    }
    if (k + 1 == xn.size()) {
      const auto& ts = config_.terminal_set;
      const double s = ts.distance(xn[k]) - (ts.radius - std::min(buf, 0.01 * ts.radius));
      if (s > 0.0) g += 2.0 * s * ts.distance_gradient(xn[k]);
    }
    return mu * g;
  }

  [[nodiscard]] Plant::Jacobians jacobian(const Vector& x, const Vector& u) const {
    if (plant_.has_jacobian()) return plant_.jacobian(x, u);
    const double h = config_.solver.fd_step;
    const int n = plant_.state_dim();
    const int p = plant_.input_dim();
    Plant::Jacobians j{Matrix(n, n), Matrix(n, p)};
    for (int i = 0; i < n; ++i) {
      Vector a = x, b = x;
      a[i] += h;
      b[i] -= h;
      j.state.col(i) = plant_.difference(plant_.evaluate(a, u), plant_.evaluate(b, u)) / (2.0 * h);
    }
    for (int i = 0; i < p; ++i) {
      Vector a = u, b = u;
      a[i] += h;
      b[i] -= h;
      j.input.col(i) = plant_.difference(plant_.evaluate(x, a), plant_.evaluate(x, b)) / (2.0 * h);
    }
    return j;
  }

  void stage_grad(const Vector& x, const Vector& u, int t, Vector& gx, Vector& gu) const {
    if (config_.costs.stage_gradient) {
      config_.costs.stage_gradient(x, u, t, gx, gu);
      return;
    }
    const double h = config_.solver.fd_step;
    gx.resize(x.size());
    gu.resize(u.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Vector a = x, b = x;
      a[i] += h;
      b[i] -= h;
      gx[i] = (config_.costs.stage(a, u, t) - config_.costs.stage(b, u, t)) / (2.0 * h);
    }
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      Vector a = u, b = u;
      a[i] += h;
      b[i] -= h;
      gu[i] = (config_.costs.stage(x, a, t) - config_.costs.stage(x, b, t)) / (2.0 * h);
    }
  }

  void terminal_grad(const Vector& x, Vector& g) const {
    if (config_.costs.terminal_gradient) {
      config_.costs.terminal_gradient(x, g);
      return;
    }
    const double h = config_.solver.fd_step;
    g.resize(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      Vector a = x, b = x;
      a[i] += h;
      b[i] -= h;
      g[i] = (config_.costs.terminal(a) - config_.costs.terminal(b)) / (2.0 * h);
    }
  }

  [[nodiscard]] std::vector<Vector> fd_gradient(const std::vector<Vector>& us) const {
    const double h = config_.solver.fd_step;
    std::vector<Vector> g(us.size());
    auto work = us;
    for (std::size_t k = 0; k < us.size(); ++k) {
      g[k].resize(us[k].size());
      for (Eigen::Index i = 0; i < us[k].size(); ++i) {
        const double orig = work[k][i];
        work[k][i] = orig + h;
        const double fp = merit(work);
        work[k][i] = orig - h;
        const double fm = merit(work);
        work[k][i] = orig;
        g[k][i] = (fp - fm) / (2.0 * h);
      }
    }
    return g;
  }

  const Plant& plant_;
  const SafeSet& safe_set_;
  const TubeSchedule& schedule_;
  const MpcConfig& config_;
  int t_;
  Vector measured_;
  Vector nominal_;
  bool shared_start_;
};

inline double dot(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k].dot(b[k]);
  return s;
}

inline double max_abs_diff(const std::vector<Vector>& a, const std::vector<Vector>& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, (a[k] - b[k]).cwiseAbs().maxCoeff());
  return m;
}

struct PenaltyResult {
  std::vector<Vector> inputs;
  int iterations = 0;
  std::vector<std::vector<double>> merit_history;
};

/// Projected gradient with Barzilai-Borwein trial steps and Armijo
/// backtracking, escalating the penalty weight until the exact constraint
/// check passes or the iteration budget is spent.
inline PenaltyResult penalty_solve(PenaltyProblem& prob, const Plant& plant, const SafeSet& safe_set,
                                   const TubeSchedule& schedule, const MpcConfig& config, int t, const Vector& nominal,
                                   std::vector<Vector> us) {
  const auto& sc = config.solver;
  const Box& uset = plant.input_set();
  PenaltyResult res;
  int budget = sc.max_iterations;
  prob.mu = sc.penalty_weight;
  int updates_left = sc.max_penalty_updates;
  while (budget > 0) {
    // Spread the budget so every remaining penalty weight gets a share.
    int phase_budget = std::max(1, budget / (updates_left + 1));
    bool converged = false;
    std::vector<double> history;
    double f = prob.merit(us);
    history.push_back(f);
    auto g = prob.gradient(us);
    double step = 0.0;
    {
      double gmax = 0.0;
      for (const auto& gk : g) gmax = std::max(gmax, gk.cwiseAbs().maxCoeff());
      const double span = (uset.upper - uset.lower).maxCoeff();
      step = gmax > 0.0 ? 0.1 * span / gmax : 1.0;
    }
    while (phase_budget > 0) {
      --phase_budget;
      --budget;
      ++res.iterations;
      std::vector<Vector> trial(us.size());
      double ft = 0.0;
      bool accepted = false;
      double alpha = step;
      for (int bt = 0; bt < sc.max_backtracks; ++bt) {
        for (std::size_t k = 0; k < us.size(); ++k) trial[k] = uset.clamp(us[k] - alpha * g[k]);
        std::vector<Vector> d(us.size());
        for (std::size_t k = 0; k < us.size(); ++k) d[k] = trial[k] - us[k];
        const double decrease = dot(g, d);
        if (max_abs_diff(trial, us) == 0.0) break;
        ft = prob.merit(trial);
        if (ft <= f + sc.armijo * decrease) {
          accepted = true;
          break;
        }
        alpha *= sc.backtrack;
      }
      if (!accepted) {
        converged = true;
        break;
      }
      const double change = max_abs_diff(trial, us);
      auto gt = prob.gradient(trial);
      // Barzilai-Borwein step for the next trial
      double ss = 0.0, sy = 0.0;
      for (std::size_t k = 0; k < us.size(); ++k) {
        const Vector s = trial[k] - us[k];
        const Vector y = gt[k] - g[k];
        ss += s.squaredNorm();
        sy += s.dot(y);
      }
      step = sy > 0.0 ? ss / sy : 2.0 * alpha;
      const double rel = (f - ft) / std::max(1.0, std::abs(f));
      us = std::move(trial);
      g = std::move(gt);
      f = ft;
      history.push_back(f);
      if (change < sc.convergence_tol || rel < sc.convergence_tol * 1e-3) {
        converged = true;
        break;
      }
    }
    res.merit_history.push_back(std::move(history));
    const auto xn = rollout(plant, nominal, us);
    if (check_constraints(safe_set, schedule, config, t, xn).ok) {
      if (converged) break;
      continue;  // feasible but not converged: keep the weight
    }
    if (updates_left == 0) break;
    --updates_left;
    prob.mu *= sc.penalty_growth;
  }
  res.inputs = std::move(us);
  return res;
}

inline MpcSolution make_solution(const Plant& plant, const MpcConfig& config, int t, const Vector& measured,
                                 const Vector& nominal, std::vector<Vector> inputs, const SafeSet& safe_set,
                                 const TubeSchedule& schedule) {
  MpcSolution s;
  s.time = t;
  s.predicted_ce = rollout(plant, measured, inputs);
  s.predicted_nominal = rollout(plant, nominal, inputs);
  s.objective = objective_value(config, t, s.predicted_ce, inputs);
  s.inputs = std::move(inputs);
  s.feasible = check_constraints(safe_set, schedule, config, t, s.predicted_nominal, &plant.input_set(), &s.inputs).ok;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Solves the deterministic surrogate program at time `state.time`.
///
/// Objective on the certainty-equivalent prediction from `measured` (X_t),
/// constraints on the nominal prediction from `state.nominal_state` (x_t).
/// Feasibility is decided by the exact constraint check, never by the
/// optimizer. When both the optimizer result and the shifted previous
/// solution verify, the one with the lower objective is returned.
inline MpcSolution solve_step(const ControllerState& state, const Vector& measured, const Plant& plant,
                              const SafeSet& safe_set, const TubeSchedule& schedule, const MpcConfig& config) {
  const int t = state.time;
  const int horizon = schedule.horizon();
  if (t < 0 || t >= horizon) throw InvalidParameter("solve_step: time must satisfy 0 <= t < T");
  if (measured.size() != plant.state_dim() || state.nominal_state.size() != plant.state_dim()) {
    throw DimensionError("solve_step: state dimension mismatch");
  }
  const int w = effective_window(config, t, horizon);
  const Vector& nominal = state.nominal_state;

  // The k = 0 constraint does not depend on the decision variables.
  if (config.enforce_safety) {
    const double slack = signed_margin(safe_set, nominal) - schedule.at(t);
    if (!(slack > 0.0)) throw InfeasibleAtStep(t, {false, 0, "eroded_safe_set", slack});
  }

  std::optional<MpcSolution> fallback;
  if (state.last_solution && state.last_solution->time == t - 1) {
    fallback = detail::make_solution(plant, config, t, measured, nominal,
                                     shifted_candidate(plant, config, *state.last_solution, horizon), safe_set,
                                     schedule);
    fallback->used_fallback = true;
  }

  // Optimizer disabled: the shifted candidate is the answer.
  if (fallback && config.solver.max_iterations == 0) {
    if (fallback->feasible || config.solver.restoration) return *fallback;
    throw InfeasibleAtStep(t, check_constraints(safe_set, schedule, config, t, fallback->predicted_nominal,
                                                &plant.input_set(), &fallback->inputs));
  }

  std::vector<Vector> warm;
  if (fallback) {
    warm = fallback->inputs;
  } else {
    const Vector zero = plant.input_set().clamp(Vector::Zero(plant.input_dim()));
    warm.assign(static_cast<std::size_t>(w), zero);
    if (t == 0) {
      for (std::size_t k = 0; k < warm.size() && k < config.initial_guess.size(); ++k) {
        warm[k] = plant.input_set().clamp(config.initial_guess[k]);
      }
    }
  }

  detail::PenaltyProblem prob(plant, safe_set, schedule, config, t, measured, nominal);
  detail::PenaltyResult pr;
  if (config.solver.max_iterations > 0) {
    pr = detail::penalty_solve(prob, plant, safe_set, schedule, config, t, nominal, warm);
  } else {
    pr.inputs = warm;
  }
  MpcSolution solved = detail::make_solution(plant, config, t, measured, nominal, std::move(pr.inputs), safe_set,
                                             schedule);
  solved.iterations = pr.iterations;
  solved.merit_history = std::move(pr.merit_history);

  if (solved.feasible && (!fallback || !fallback->feasible || solved.objective <= fallback->objective)) {
    return solved;
  }
  if (fallback && (fallback->feasible || config.solver.restoration)) {
    fallback->iterations = solved.iterations;
    fallback->merit_history = std::move(solved.merit_history);
    return *fallback;
  }
  if (solved.feasible) return solved;
  throw InfeasibleAtStep(
      t, check_constraints(safe_set, schedule, config, t, solved.predicted_nominal, &plant.input_set(), &solved.inputs));
}

/// Builds the shifted candidate for t+1 from a feasible solution at t and
/// checks it exactly against the constraints at t+1.
inline bool verify_recursive_feasibility(const Plant& plant, const SafeSet& safe_set, const TubeSchedule& schedule,
                                         const MpcConfig& config, const MpcSolution& solution, int t) {
  const int horizon = schedule.horizon();
  if (t + 1 >= horizon) return true;
  MpcSolution at_t = solution;
  at_t.time = t;
  const auto cand = shifted_candidate(plant, config, at_t, horizon);
  // x_{t+1} = f(x_t, u_t) is the second nominal prediction.
  const auto xn = rollout(plant, solution.predicted_nominal.at(1), cand);
  return check_constraints(safe_set, schedule, config, t + 1, xn, &plant.input_set(), &cand).ok;
}

struct TerminalCertificate {
  bool invariant = true;
  bool inside_eroded_set = true;
  int samples = 0;
  std::string detail;
  [[nodiscard]] bool ok() const { return invariant && inside_eroded_set; }
};

/// Sampled check that the terminal controller keeps the terminal set
/// invariant and that the set lies inside every eroded safe set. Coordinates
/// outside the terminal-set dims are drawn from `free_range`.
inline TerminalCertificate certify_terminal_set(const Plant& plant, const SafeSet& safe_set,
                                                const TubeSchedule& schedule, const MpcConfig& config,
                                                const Box& free_range, int samples, std::uint64_t seed) {
  const auto& ts = config.terminal_set;
  const int n = plant.state_dim();
  const auto idx = ts.active_dims(n);
  const auto k = static_cast<Eigen::Index>(idx.size());
  require(free_range.dim() == n, "certify_terminal_set: free_range must span the state");
  Matrix shape = Matrix::Identity(k, k);  // maps the unit ball onto the set
  if (ts.weight.size() != 0) {
    Eigen::LLT<Matrix> llt(ts.weight);
    shape = llt.matrixU().solve(Matrix::Identity(k, k));
  }
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double rmax = schedule.max_radius();
  TerminalCertificate cert;
  cert.samples = samples;
  for (int s = 0; s < samples; ++s) {
    Vector dir(k);
    for (Eigen::Index i = 0; i < k; ++i) dir[i] = gauss(rng);
    dir.normalize();
    const double scale = (s % 2 == 0) ? 1.0 : std::pow(unit(rng), 1.0 / static_cast<double>(k));
    const Vector local = shape * (ts.radius * scale * dir);
    Vector x(n);
    for (int i = 0; i < n; ++i) x[i] = free_range.lower[i] + unit(rng) * (free_range.upper[i] - free_range.lower[i]);
    for (Eigen::Index i = 0; i < k; ++i) {
      const int j = idx[static_cast<std::size_t>(i)];
      x[j] = (ts.center.size() == n ? ts.center[j] : ts.center[i]) + local[i];
    }
    const Vector u = plant.input_set().clamp(config.terminal_controller(x));
    const Vector next = plant.evaluate(x, u);
    if (ts.distance(next) > ts.radius * (1.0 + 1e-9) && cert.invariant) {
      cert.invariant = false;
      cert.detail = "successor leaves the terminal set (distance " + std::to_string(ts.distance(next)) + ")";
    }
    if (config.enforce_safety && !is_member_eroded(safe_set, x, rmax) && cert.inside_eroded_set) {
      cert.inside_eroded_set = false;
      cert.detail = "terminal set intersects the safe set eroded by " + std::to_string(rmax);
    }
  }
  return cert;
}

/// The receding-horizon controller as a feedback law. The returned function
/// owns its ControllerState and must be called with t = 0, 1, ... in order;
/// each call records the solution in `solutions` when given.
inline Feedback mpc_feedback(const Plant& plant, const SafeSet& safe_set, const TubeSchedule& schedule,
                             const MpcConfig& config, std::vector<MpcSolution>* solutions = nullptr) {
  auto state = std::make_shared<ControllerState>();
  return [&plant, &safe_set, &schedule, &config, solutions, state](int t, const Vector& X, const Vector& x) {
    state->time = t;
    state->nominal_state = x;
    MpcSolution sol = solve_step(*state, X, plant, safe_set, schedule, config);
    Vector u = sol.inputs.front();
    if (solutions) solutions->push_back(sol);
    state->last_solution = std::move(sol);
    return u;
  };
}

/// Closed-loop run: at every t the first optimal input is applied to both the
/// stochastic and the nominal system. Throws InfeasibleAtStep with the partial
/// trace attached when the program has no verified solution.
inline ClosedLoopTrace run_receding_horizon(const Plant& plant, const SafeSet& safe_set, const TubeSchedule& schedule,
                                            const MpcConfig& config, const Vector& x0, const NoiseModel& noise,
                                            int horizon, std::uint64_t seed,
                                            std::vector<MpcSolution>* solutions = nullptr) {
  config.validate(plant);
  require(schedule.horizon() == horizon, "run_receding_horizon: schedule horizon must equal T");
  ControllerState state;
  std::vector<StepDiagnostics> diags;
  Feedback feedback = [&](int t, const Vector& X, const Vector& x) -> Vector {
    state.time = t;
    state.nominal_state = x;
    const auto start = std::chrono::steady_clock::now();
    MpcSolution sol = solve_step(state, X, plant, safe_set, schedule, config);
    const auto stop = std::chrono::steady_clock::now();
    diags.push_back({sol.feasible, sol.used_fallback, sol.objective, sol.iterations,
                     std::chrono::duration<double>(stop - start).count()});
    Vector u = sol.inputs.front();
    if (solutions) solutions->push_back(sol);
    state.last_solution = std::move(sol);
    return u;
  };
  ClosedLoopTrace partial;
  ClosedLoopTrace tr;
  try {
    tr = rollout_pair(plant, feedback, noise, x0, horizon, seed, &partial);
  } catch (InfeasibleAtStep& e) {
    partial.diagnostics = diags;
    partial.failure = e.what();
    annotate_safety(partial, safe_set);
    e.attach_trace(std::move(partial));
    throw;
  }
  tr.diagnostics = std::move(diags);
  annotate_safety(tr, safe_set);
  for (int t = 0; t < tr.steps(); ++t) {
    const auto ti = static_cast<std::size_t>(t);
    tr.stochastic_costs.push_back(config.costs.stage(tr.stochastic_states[ti], tr.inputs[ti], t));
    tr.nominal_costs.push_back(config.costs.stage(tr.nominal_states[ti], tr.inputs[ti], t));
  }
  tr.stochastic_costs.push_back(config.costs.terminal(tr.stochastic_states.back()));
  tr.nominal_costs.push_back(config.costs.terminal(tr.nominal_states.back()));
  return tr;
}

}  // namespace sempc
