#pragma once

#include <sempc/core.hpp>
#include <sempc/geometry.hpp>
#include <sempc/noise.hpp>
#include <sempc/systems.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace sempc {

/// Per-step record of the controller that produced u_t.
struct StepDiagnostics {
  bool feasible = true;
  bool used_fallback = false;
  double objective = 0.0;
  int iterations = 0;
  double solve_seconds = 0.0;
};

/// Paired stochastic (X) and nominal (x) trajectories driven by the same inputs.
template <typename Scalar = double>
struct ClosedLoopTraceT {
  std::vector<VectorT<Scalar>> stochastic_states;  // X_0..X_T
  std::vector<VectorT<Scalar>> nominal_states;     // x_0..x_T
  std::vector<VectorT<Scalar>> inputs;             // u_0..u_{T-1}
  std::vector<Vector> noises;                      // w_0..w_{T-1}
  std::vector<VectorT<Scalar>> deviation_vectors;  // X_t - x_t (plant difference)
  std::vector<double> deviations;                  // ||X_t - x_t||
  std::vector<double> stochastic_costs;            // L_t(X_t, u_t), then Phi(X_T)
  std::vector<double> nominal_costs;               // L_t(x_t, u_t), then Phi(x_T)
  std::vector<bool> safe;                          // X_t in C
  std::vector<StepDiagnostics> diagnostics;
  std::uint64_t seed = 0;
  std::optional<int> failed_at;                    // step where the controller gave up
  std::string failure;

  [[nodiscard]] int steps() const { return static_cast<int>(inputs.size()); }
  [[nodiscard]] bool completed() const { return !failed_at.has_value(); }
};

using ClosedLoopTrace = ClosedLoopTraceT<double>;

/// u_t as a function of the time, the measured state X_t and the nominal x_t.
template <typename Scalar = double>
using FeedbackT = std::function<VectorT<Scalar>(int, const VectorT<Scalar>&, const VectorT<Scalar>&)>;
using Feedback = FeedbackT<double>;

/// Open-loop input sequence as a feedback law.
template <typename Scalar = double>
FeedbackT<Scalar> open_loop(std::vector<VectorT<Scalar>> inputs) {
  return [inputs = std::move(inputs)](int t, const VectorT<Scalar>&, const VectorT<Scalar>&) {
    return inputs.at(static_cast<std::size_t>(t));
  };
}

namespace detail {

template <typename Scalar>
double to_double(const Scalar& s) {
  if constexpr (std::is_same_v<Scalar, double>) {
    return s;
  } else {
    return s.template convert_to<double>();
  }
}

template <typename Scalar>
double norm_of(const VectorT<Scalar>& v) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double d = to_double(v[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace detail

/// Rolls out X_{t+1} = f(X_t,u_t) + w_t and x_{t+1} = f(x_t,u_t) from
/// X_0 = x_0 with u_t = feedback(t, X_t, x_t) applied to both.
///
/// Noise comes from a stream seeded with `seed`; the zero model draws nothing.
/// An exception thrown by the feedback propagates after the partial trace has
/// been stored in `partial` when one is given.
template <typename Scalar>
ClosedLoopTraceT<Scalar> rollout_pair(const BasicPlant<Scalar>& plant, const FeedbackT<Scalar>& feedback,
                                      const NoiseModel& noise, const VectorT<Scalar>& x0, int horizon,
                                      std::uint64_t seed, ClosedLoopTraceT<Scalar>* partial = nullptr) {
  require(horizon >= 0, "rollout_pair: horizon must be >= 0");
  if (x0.size() != plant.state_dim()) throw DimensionError("rollout_pair: x0 has the wrong dimension");
  ClosedLoopTraceT<Scalar> tr;
  tr.seed = seed;
  Rng rng(seed);
  tr.stochastic_states.push_back(x0);
  tr.nominal_states.push_back(x0);
  tr.deviation_vectors.push_back(VectorT<Scalar>::Zero(x0.size()));
  tr.deviations.push_back(0.0);
  for (int t = 0; t < horizon; ++t) {
    const auto& X = tr.stochastic_states.back();
    const auto& x = tr.nominal_states.back();
    VectorT<Scalar> u;
    try {
      u = feedback(t, X, x);
    } catch (...) {
      tr.failed_at = t;
      if (partial) *partial = tr;
      throw;
    }
    const Vector w = sample_noise(noise, plant.state_dim(), rng);
    VectorT<Scalar> Xn = step_nominal(plant, X, u);
    Xn += w.template cast<Scalar>();
    VectorT<Scalar> xn = step_nominal(plant, x, u);
    VectorT<Scalar> e = plant.difference(Xn, xn);
    tr.deviations.push_back(detail::norm_of(e));
    tr.deviation_vectors.push_back(std::move(e));
    tr.stochastic_states.push_back(std::move(Xn));
    tr.nominal_states.push_back(std::move(xn));
    tr.inputs.push_back(std::move(u));
    tr.noises.push_back(w);
  }
  return tr;
}

/// Marks X_t in C for every t.
inline void annotate_safety(ClosedLoopTrace& tr, const SafeSet& set) {
  tr.safe.clear();
  for (const auto& X : tr.stochastic_states) tr.safe.push_back(is_member_eroded(set, X, 0.0));
}

[[nodiscard]] inline bool trajectory_safe(const ClosedLoopTrace& tr) {
  if (!tr.completed()) return false;
  for (bool s : tr.safe)
    if (!s) return false;
  return true;
}

/// ||X_t - x_t|| <= r_t for every recorded t.
[[nodiscard]] inline bool within_tube(const ClosedLoopTrace& tr, const std::vector<double>& radii) {
  if (!tr.completed()) return false;
  for (std::size_t t = 0; t < tr.deviations.size(); ++t) {
    if (t >= radii.size() || tr.deviations[t] > radii[t]) return false;
  }
  return true;
}

/// Worst ratio ||X_{t+1} - x_{t+1} - w_t|| / ||X_t - x_t|| over a trace, the
/// quantity the open-loop Lipschitz constant has to dominate. The drift
/// f(X_t, u_t) - f(x_t, u_t) is recomputed from the plant so that adding and
/// removing w_t leaves no rounding residue. Steps with
/// X_t = x_t must reproduce the same successor exactly; such a step that
/// does not returns +infinity.
inline double worst_contraction_ratio(const Plant& plant, const ClosedLoopTrace& tr) {
  double worst = 0.0;
  for (int t = 0; t < tr.steps(); ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const Vector drift = plant.difference(plant.evaluate(tr.stochastic_states[ti], tr.inputs[ti]),
                                          plant.evaluate(tr.nominal_states[ti], tr.inputs[ti]));
    const double before = plant.difference(tr.stochastic_states[ti], tr.nominal_states[ti]).norm();
    const double after = drift.norm();
    if (before == 0.0) {
      if (after > 0.0) return std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max(worst, after / before);
  }
  return worst;
}

/// Per-step check of ||X_{t+1} - x_{t+1} - w_t|| <= L ||X_t - x_t|| with a
/// relative floating-point allowance.
[[nodiscard]] inline bool satisfies_contraction(const Plant& plant, const ClosedLoopTrace& tr, double lipschitz,
                                                double rel_tol = 1e-9) {
  for (int t = 0; t < tr.steps(); ++t) {
    const auto ti = static_cast<std::size_t>(t);
    const double before = plant.difference(tr.stochastic_states[ti], tr.nominal_states[ti]).norm();
    const double after = plant.difference(plant.evaluate(tr.stochastic_states[ti], tr.inputs[ti]),
                                          plant.evaluate(tr.nominal_states[ti], tr.inputs[ti]))
                             .norm();
    if (after > lipschitz * before * (1.0 + rel_tol) + 1e-14) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct Interval {
  double lower = 0.0;
  double upper = 1.0;
  [[nodiscard]] double half_width() const { return 0.5 * (upper - lower); }
};

/// Wilson score interval for a binomial proportion (z = 1.96 for 95%).
inline Interval wilson_interval(std::size_t successes, std::size_t trials, double z = 1.959963984540054) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

/// Running mean and variance (Welford); merges associatively.
struct RunningStats {
  std::size_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++count;
    const double d = x - mean;
    mean += d / static_cast<double>(count);
    m2 += d * (x - mean);
  }

  void merge(const RunningStats& o) {
    if (o.count == 0) return;
    if (count == 0) {
      *this = o;
      return;
    }
    const double n = static_cast<double>(count + o.count);
    const double d = o.mean - mean;
    mean += d * static_cast<double>(o.count) / n;
    m2 += o.m2 + d * d * static_cast<double>(count) * static_cast<double>(o.count) / n;
    count += o.count;
  }

  [[nodiscard]] double variance() const { return count > 1 ? m2 / static_cast<double>(count - 1) : 0.0; }
  [[nodiscard]] double standard_error() const {
    return count > 0 ? std::sqrt(variance() / static_cast<double>(count)) : 0.0;
  }
};

}  // namespace sempc
