#pragma once

#include <sempc/core.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sempc {

/// Parameters of the probabilistic-tube radius r_{delta,t}.
///
/// `sigma` is the square root of the sub-Gaussian variance proxy of the
/// additive disturbance, `lipschitz` the open-loop state-Lipschitz constant.
/// `epsilon` and `delta_t` are free tightening knobs; `delta_t` only enters
/// the contracting (L < 1) branch.
struct TubeParams {
  double sigma = 0.0;
  double lipschitz = 0.0;
  int state_dim = 1;
  double delta = 0.05;
  int horizon = 1;
  double epsilon = 0.7;
  int delta_t = 1;

  [[nodiscard]] double epsilon1() const { return -std::log1p(-epsilon * epsilon) / (epsilon * epsilon); }
  [[nodiscard]] double epsilon2() const { return 2.0 / (epsilon * epsilon); }

  void validate() const {
    require(std::isfinite(sigma) && sigma >= 0.0, "tube: sigma must be finite and >= 0");
    require(std::isfinite(lipschitz) && lipschitz >= 0.0, "tube: lipschitz must be finite and >= 0");
    require(state_dim >= 1, "tube: state_dim must be >= 1");
    require(delta > 0.0 && delta < 1.0, "tube: delta must lie in (0, 1)");
    require(horizon >= 0, "tube: horizon must be >= 0");
    require(epsilon > 0.0 && epsilon < 1.0, "tube: epsilon must lie in (0, 1)");
    require(delta_t >= 1, "tube: delta_t must be >= 1");
    require(std::isfinite(epsilon1()) && epsilon1() > 0.0, "tube: epsilon1 must be finite");
    require(!(lipschitz == 0.0 && delta_t > 1), "tube: delta_t > 1 needs lipschitz > 0");
  }
};

namespace detail {

// sum_{k=0}^{count-1} ratio^k for ratio = L^2 (or L^-2), written through
// expm1/log so it stays accurate for L close to 1. count >= 0.
inline double geometric_sum_sq(double lipschitz, double count, bool inverse) {
  if (count <= 0.0) return 0.0;
  if (lipschitz == 1.0) return count;
  const double log_ratio = (inverse ? -2.0 : 2.0) * std::log(lipschitz);
  return std::expm1(count * log_ratio) / std::expm1(log_ratio);
}

}  // namespace detail

/// Radius r_{delta,t} of the probabilistic tube at time t (0 <= t <= T).
inline double pt_radius(const TubeParams& p, int t) {
  p.validate();
  if (t < 0 || t > p.horizon) {
    throw InvalidParameter("pt_radius: time index " + std::to_string(t) + " outside [0, " +
                           std::to_string(p.horizon) + "]");
  }
  const double n = p.state_dim;
  const double L = p.lipschitz;
  if (L < 1.0) {
    // (1 - L^{2t}) / (1 - L^2)
    const double growth = L == 0.0 ? (t > 0 ? 1.0 : 0.0) : detail::geometric_sum_sq(L, t, false);
    // (L^{-2(dt-1)} - 1) / (L^{-2} - 1)
    const double window = detail::geometric_sum_sq(L, p.delta_t - 1, true);
    if (growth == 0.0 && window == 0.0) return 0.0;
    const double log_term = std::log(2.0 * p.horizon) - std::log(p.delta) - std::log(double(p.delta_t));
    const double conc = p.epsilon1() * n + p.epsilon2() * log_term;
    require(conc > 0.0, "pt_radius: concentration term must be positive (check T, delta, delta_t)");
    return p.sigma * (std::sqrt(growth) + std::sqrt(window)) * std::sqrt(conc);
  }
  // L >= 1: L^t sigma sqrt((L^{-2T} - 1)/(L^{-2} - 1) (eps1 n + eps2 log(1/delta)))
  const double spread = detail::geometric_sum_sq(L, p.horizon, true);
  if (spread == 0.0) return 0.0;
  const double conc = p.epsilon1() * n - p.epsilon2() * std::log(p.delta);
  return std::pow(L, t) * p.sigma * std::sqrt(spread * conc);
}

/// Per-step erosion radii for t = 0..T.
struct TubeSchedule {
  std::vector<double> radii;
  TubeParams params;

  [[nodiscard]] int horizon() const { return static_cast<int>(radii.size()) - 1; }
  [[nodiscard]] double at(int t) const {
    if (t < 0 || t >= static_cast<int>(radii.size())) {
      throw InvalidParameter("tube schedule: index " + std::to_string(t) + " out of range");
    }
    return radii[static_cast<std::size_t>(t)];
  }
  [[nodiscard]] double max_radius() const { return *std::max_element(radii.begin(), radii.end()); }
};

inline TubeSchedule tube_schedule(const TubeParams& params) {
  params.validate();
  TubeSchedule s;
  s.params = params;
  s.radii.reserve(static_cast<std::size_t>(params.horizon) + 1);
  for (int t = 0; t <= params.horizon; ++t) s.radii.push_back(pt_radius(params, t));
  return s;
}

/// Grid search over epsilon in {0.1, ..., 0.9} and, for L < 1, delta_t in
/// {1, ..., T}, minimizing the largest radius of the schedule.
inline TubeParams optimize_tube_params(TubeParams params) {
  params.validate();
  TubeParams best = params;
  double best_max = std::numeric_limits<double>::infinity();
  const int max_dt = (params.lipschitz < 1.0 && params.lipschitz > 0.0) ? std::max(1, params.horizon) : 1;
  for (int e = 1; e <= 9; ++e) {
    for (int dt = 1; dt <= max_dt; ++dt) {
      TubeParams cand = params;
      cand.epsilon = 0.1 * e;
      if (params.lipschitz < 1.0) cand.delta_t = dt;
      double worst = 0.0;
      bool ok = true;
      for (int t = 0; t <= cand.horizon && ok; ++t) {
        try {
          worst = std::max(worst, pt_radius(cand, t));
        } catch (const InvalidParameter&) {
          ok = false;
        }
      }
      if (ok && worst < best_max) {
        best_max = worst;
        best = cand;
      }
    }
  }
  return best;
}

/// Upper bound on E||X_t - x_t||^2: n sigma^2 (L^{2t} - 1) / (L^2 - 1).
inline double mean_sq_deviation_bound(double sigma, double lipschitz, int state_dim, int t) {
  require(std::isfinite(sigma) && sigma >= 0.0, "mean_sq_deviation_bound: sigma must be >= 0");
  require(std::isfinite(lipschitz) && lipschitz >= 0.0, "mean_sq_deviation_bound: lipschitz must be >= 0");
  require(state_dim >= 1, "mean_sq_deviation_bound: state_dim must be >= 1");
  require(t >= 0, "mean_sq_deviation_bound: t must be >= 0");
  if (t == 0) return 0.0;
  const double g = lipschitz == 0.0 ? 1.0 : detail::geometric_sum_sq(lipschitz, t, false);
  return state_dim * sigma * sigma * g;
}

/// Bound on J(X,u) - J~(x,u) for L_c-Lipschitz stage and terminal costs.
inline double cost_gap_bound(double sigma, double lipschitz, int state_dim, double cost_lipschitz, int horizon) {
  require(std::isfinite(cost_lipschitz) && cost_lipschitz >= 0.0, "cost_gap_bound: cost_lipschitz must be >= 0");
  require(horizon >= 1, "cost_gap_bound: horizon must be >= 1");
  double total = 0.0;
  for (int t = 0; t <= horizon; ++t) {
    total += std::sqrt(cost_lipschitz * cost_lipschitz * mean_sq_deviation_bound(sigma, lipschitz, state_dim, t));
  }
  return total;
}

}  // namespace sempc
