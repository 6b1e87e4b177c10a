#pragma once

#include <sempc/core.hpp>
#include <sempc/mpc.hpp>
#include <sempc/noise.hpp>
#include <sempc/sim.hpp>
#include <sempc/tube.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace sempc {

/// One Monte Carlo sample: a trace produced for run index `index` with the
/// derived seed. A run aborted by the controller carries its partial trace.
struct RunRecord {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  ClosedLoopTrace trace;
  bool infeasible = false;
  std::string failure;
};

using RunFunction = std::function<RunRecord(std::size_t index, std::uint64_t seed)>;

struct MonteCarloReport {
  std::size_t num_runs = 0;
  std::uint64_t base_seed = 0;
  std::size_t safe_runs = 0;
  std::size_t contained_runs = 0;
  std::size_t infeasible_runs = 0;
  double trajectory_safety_rate = 0.0;
  Interval safety_interval;
  double tube_containment_rate = 0.0;
  Interval containment_interval;
  /// E||X_t - x_t||^2 over completed runs, t = 0..T.
  std::vector<RunningStats> sq_deviation;
  /// L_t(X_t, u_t) and L_t(x_t, u_t) (terminal cost at t = T), over runs with costs.
  std::vector<RunningStats> stochastic_cost;
  std::vector<RunningStats> nominal_cost;
  /// J(X,u) - J~(x,u) and its absolute value per run.
  RunningStats cost_gap;
  RunningStats abs_cost_gap;
  RunningStats nominal_total_cost;
  std::size_t fallback_steps = 0;
  std::size_t solver_steps = 0;
  double solve_seconds = 0.0;
  /// Failure messages of infeasible runs, by run index.
  std::vector<std::pair<std::size_t, std::string>> failures;
};

/// Folds per-run records into a report. Records must be in index order so the
/// result does not depend on how the runs were scheduled.
inline MonteCarloReport aggregate_runs(const std::vector<RunRecord>& runs, const std::vector<double>& radii,
                                       std::uint64_t base_seed) {
  MonteCarloReport rep;
  rep.num_runs = runs.size();
  rep.base_seed = base_seed;
  const std::size_t len = radii.size();
  rep.sq_deviation.resize(len);
  rep.stochastic_cost.resize(len);
  rep.nominal_cost.resize(len);
  for (const auto& run : runs) {
    const auto& tr = run.trace;
    if (run.infeasible) {
      ++rep.infeasible_runs;
      rep.failures.emplace_back(run.index, run.failure);
    }
    if (!run.infeasible && trajectory_safe(tr)) ++rep.safe_runs;
    if (!run.infeasible && within_tube(tr, radii)) ++rep.contained_runs;
    for (const auto& d : tr.diagnostics) {
      ++rep.solver_steps;
      if (d.used_fallback) ++rep.fallback_steps;
      rep.solve_seconds += d.solve_seconds;
    }
    if (run.infeasible) continue;
    for (std::size_t t = 0; t < tr.deviations.size() && t < len; ++t) {
      rep.sq_deviation[t].add(tr.deviations[t] * tr.deviations[t]);
    }
    if (!tr.stochastic_costs.empty()) {
      double j = 0.0, jn = 0.0;
      for (std::size_t t = 0; t < tr.stochastic_costs.size() && t < len; ++t) {
        rep.stochastic_cost[t].add(tr.stochastic_costs[t]);
        rep.nominal_cost[t].add(tr.nominal_costs[t]);
        j += tr.stochastic_costs[t];
        jn += tr.nominal_costs[t];
      }
      rep.cost_gap.add(j - jn);
      rep.abs_cost_gap.add(std::abs(j - jn));
      rep.nominal_total_cost.add(jn);
    }
  }
  if (rep.num_runs > 0) {
    const double n = static_cast<double>(rep.num_runs);
    rep.trajectory_safety_rate = static_cast<double>(rep.safe_runs) / n;
    rep.tube_containment_rate = static_cast<double>(rep.contained_runs) / n;
  }
  rep.safety_interval = wilson_interval(rep.safe_runs, rep.num_runs);
  rep.containment_interval = wilson_interval(rep.contained_runs, rep.num_runs);
  return rep;
}

/// Runs `run` for indices 0..N-1 on up to `parallelism` threads. Each run gets
/// derive_seed(base_seed, i). `keep` is called in index order once all runs
/// finished, so callers can retain a subsample of the traces.
inline MonteCarloReport monte_carlo_runs(const RunFunction& run, std::size_t num_runs, const std::vector<double>& radii,
                                         std::uint64_t base_seed, int parallelism,
                                         const std::function<void(const RunRecord&)>& keep = {}) {
  require(num_runs >= 1, "monte_carlo: N must be >= 1");
  require(parallelism >= 1, "monte_carlo: parallelism must be >= 1");
  std::vector<RunRecord> records(num_runs);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= num_runs) return;
      try {
        records[i] = run(i, derive_seed(base_seed, i));
        records[i].index = i;
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(num_runs);
        return;
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(parallelism), num_runs));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  if (keep)
    for (const auto& r : records) keep(r);
  return aggregate_runs(records, radii, base_seed);
}

/// Receding-horizon Monte Carlo: N independent closed loops from x0.
/// Infeasible runs are recorded and count as unsafe.
inline MonteCarloReport monte_carlo(const Plant& plant, const SafeSet& safe_set, const TubeSchedule& schedule,
                                    const MpcConfig& config, const Vector& x0, const NoiseModel& noise, int horizon,
                                    std::size_t num_runs, std::uint64_t base_seed, int parallelism,
                                    const std::function<void(const RunRecord&)>& keep = {}) {
  RunFunction run = [&](std::size_t index, std::uint64_t seed) {
    RunRecord rec;
    rec.index = index;
    rec.seed = seed;
    try {
      rec.trace = run_receding_horizon(plant, safe_set, schedule, config, x0, noise, horizon, seed);
    } catch (const InfeasibleAtStep& e) {
      rec.infeasible = true;
      rec.failure = e.what();
      if (e.partial_trace()) rec.trace = *e.partial_trace();
    }
    return rec;
  };
  return monte_carlo_runs(run, num_runs, schedule.radii, base_seed, parallelism, keep);
}

}  // namespace sempc
