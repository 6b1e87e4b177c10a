#pragma once

// Experiment orchestration and result files. Needs yaml-cpp (through
// scenario.hpp), nlohmann_json and, for the deviation experiment, GMP.

#include <sempc/exact.hpp>
#include <sempc/expression.hpp>
#include <sempc/monte_carlo.hpp>
#include <sempc/scenario.hpp>

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sempc {

inline constexpr const char* kVersion = "1.0.0";

enum ExitCode : int {
  exit_ok = 0,
  exit_internal = 1,
  exit_validation = 2,
  exit_infeasible = 3,
  exit_threshold = 4,
};

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Number formatting: 12 significant digits everywhere
// ---------------------------------------------------------------------------

inline std::string fmt12(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

/// JSON number rounded to 12 significant digits; non-finite values become
/// strings so the document stays valid JSON.
inline Json num(double v) {
  if (!std::isfinite(v)) return fmt12(v);
  return std::stod(fmt12(v));
}

inline Json num_array(const Vector& v) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v[i]));
  return a;
}

inline Json num_array(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline Json num_matrix(const Matrix& m) {
  Json a = Json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(num_array(Vector(m.row(i).transpose())));
  return a;
}

/// CSV writer whose first line names the producing scenario and hash.
class CsvTable {
 public:
  CsvTable(std::vector<std::string> header, std::string provenance)
      : header_(std::move(header)), provenance_(std::move(provenance)) {}

  void row(const std::vector<std::string>& cells) { rows_.push_back(cells); }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << "# " << provenance_ << "\n";
    for (std::size_t i = 0; i < header_.size(); ++i) out << (i ? "," : "") << header_[i];
    out << "\n";
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
      out << "\n";
    }
  }

  [[nodiscard]] std::string str() const {
    std::ostringstream out;
    for (std::size_t i = 0; i < header_.size(); ++i) out << (i ? "," : "") << header_[i];
    out << "\n";
    for (const auto& r : rows_) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
      out << "\n";
    }
    return out.str();
  }

 private:
  std::vector<std::string> header_;
  std::string provenance_;
  std::vector<std::vector<std::string>> rows_;
};

inline void write_json(const std::filesystem::path& path, const Json& doc) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Scenario echo
// ---------------------------------------------------------------------------

inline Json scenario_json(const Scenario& s) {
  Json j;
  j["name"] = s.name;
  Json p;
  p["kind"] = s.plant.kind;
  if (s.plant.kind == "linear" || s.plant.kind == "tanh") {
    p["A"] = num_matrix(s.plant.a);
    p["B"] = num_matrix(s.plant.b);
    if (s.plant.kind == "tanh") p["beta"] = num(s.plant.beta);
  } else if (s.plant.kind == "unicycle") {
    p["step_size"] = num(s.plant.unicycle.step_size);
    p["k_rho"] = num(s.plant.unicycle.stabilizer.k_rho);
    p["k_alpha"] = num(s.plant.unicycle.stabilizer.k_alpha);
  } else {
    const auto& q = s.plant.quadrotor;
    p["step_size"] = num(q.step_size);
    p["gravity"] = num(q.gravity);
    p["arm_length"] = num(q.arm_length);
    p["inertia"] = num(q.inertia);
    p["mass"] = num(q.mass);
    p["gain"] = num_matrix(q.gain);
  }
  p["input_bound"] = num(s.plant.input_set.upper.maxCoeff());
  p["lipschitz"] = num(s.make_plant().lipschitz());
  j["plant"] = p;
  j["noise"] = {{"kind", s.noise.kind},
                {"value", num(s.noise.value)},
                {"parameter", s.noise.parameter},
                {"sigma", num(s.noise.model().variance_proxy())}};
  Json obstacles = Json::array();
  for (const auto& o : s.safe_set.obstacles) {
    Json ob;
    if (const auto* d = std::get_if<Disk>(&o.shape)) {
      ob["disk"] = {{"center", {num(d->center[0]), num(d->center[1])}}, {"radius", num(d->radius)}};
    } else {
      const auto& r = std::get<Rect>(o.shape);
      ob["rect"] = {{"lower", {num(r.lower[0]), num(r.lower[1])}}, {"upper", {num(r.upper[0]), num(r.upper[1])}}};
    }
    ob["dims"] = {o.dims[0], o.dims[1]};
    obstacles.push_back(ob);
  }
  Json ss;
  ss["obstacles"] = obstacles;
  if (s.safe_set.workspace) {
    const auto& w = *s.safe_set.workspace;
    ss["workspace"] = {{"lower", {num(w.box.lower[0]), num(w.box.lower[1])}},
                       {"upper", {num(w.box.upper[0]), num(w.box.upper[1])}},
                       {"dims", {w.dims[0], w.dims[1]}}};
  }
  j["safe_set"] = ss;
  j["tube"] = {{"delta", num(s.delta)},
               {"epsilon", s.optimize_tube ? Json("optimize") : num(s.epsilon)},
               {"delta_t", s.delta_t}};
  Json ts;
  ts["radius"] = num(s.terminal_set.radius);
  ts["center"] = num_array(s.terminal_set.center);
  ts["dims"] = s.terminal_set.dims;
  if (s.terminal_set.weight.size() != 0) ts["weight"] = num_matrix(s.terminal_set.weight);
  Json costs;
  costs["kind"] = s.costs.kind;
  if (s.costs.kind == "l1") {
    costs["a"] = num(s.costs.a);
    costs["b"] = num(s.costs.b);
  } else {
    costs["Q"] = num_matrix(s.costs.q);
    costs["R"] = num_matrix(s.costs.r);
    costs["Qf"] = num_matrix(s.costs.qf);
  }
  const auto& so = s.solver;
  Json solver = {{"max_iterations", so.max_iterations},
                 {"penalty_weight", num(so.penalty_weight)},
                 {"penalty_growth", num(so.penalty_growth)},
                 {"max_penalty_updates", so.max_penalty_updates},
                 {"armijo", num(so.armijo)},
                 {"backtrack", num(so.backtrack)},
                 {"max_backtracks", so.max_backtracks},
                 {"gradient_mode", so.gradient_mode == GradientMode::finite_difference ? "finite_difference"
                                                                                       : "analytic_if_available"},
                 {"fd_step", num(so.fd_step)},
                 {"convergence_tol", num(so.convergence_tol)},
                 {"restoration", so.restoration},
                 {"constraint_buffer", num(so.constraint_buffer)}};
  j["mpc"] = {{"window", s.window},
              {"enforce_safety", s.enforce_safety},
              {"terminal_set", ts},
              {"costs", costs},
              {"solver", solver}};
  j["horizon"] = s.horizon;
  if (s.full_horizon) j["full_horizon"] = *s.full_horizon;
  j["initial_state"] = num_array(s.initial_state);
  j["monte_carlo"] = {{"runs", s.runs},
                      {"seed", s.seed},
                      {"parallelism", s.parallelism},
                      {"subsample_traces", s.subsample_traces},
                      {"certify_samples", s.certify_samples}};
  j["stabilizer_baseline"] = s.stabilizer_baseline;
  return j;
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::optional<int> parallelism;
  std::optional<std::size_t> subsample_traces;
  bool full_horizon = false;
  std::filesystem::path out_dir = "results";
  std::string command_line;
};

struct NominalChecks {
  std::size_t runs_checked = 0;
  std::size_t nominal_in_eroded_set = 0;  // runs whose nominal satisfies the eroded set at every t
  std::size_t terminal_reached = 0;       // runs whose final nominal state lies in the terminal set
};

struct BaselineResult {
  ClosedLoopTrace trace;
  int eroded_violations = 0;
  std::optional<int> first_violation;
  int safe_set_violations = 0;
};

/// Nominal trajectory with zero MPC input: the plant's stabilizer alone.
inline BaselineResult stabilizer_baseline(const Plant& plant, const SafeSet& safe_set, const TubeSchedule& schedule,
                                          const Vector& x0) {
  BaselineResult b;
  const Vector zero = Vector::Zero(plant.input_dim());
  b.trace = rollout_pair(plant, Feedback([zero](int, const Vector&, const Vector&) { return zero; }),
                         NoiseModel::zero(), x0, schedule.horizon(), 0);
  annotate_safety(b.trace, safe_set);
  for (int t = 0; t <= schedule.horizon(); ++t) {
    const auto& x = b.trace.nominal_states[static_cast<std::size_t>(t)];
    if (!is_member_eroded(safe_set, x, schedule.at(t))) {
      ++b.eroded_violations;
      if (!b.first_violation) b.first_violation = t;
    }
    if (!is_member_eroded(safe_set, x, 0.0)) ++b.safe_set_violations;
  }
  return b;
}

inline bool nominal_in_eroded_set(const ClosedLoopTrace& tr, const SafeSet& safe_set, const TubeSchedule& schedule) {
  for (std::size_t t = 0; t < tr.nominal_states.size(); ++t) {
    if (!is_member_eroded(safe_set, tr.nominal_states[t], schedule.at(static_cast<int>(t)))) return false;
  }
  return true;
}

inline Json trace_json(const RunRecord& r) {
  const auto& tr = r.trace;
  Json j;
  j["run"] = r.index;
  j["seed"] = r.seed;
  j["infeasible"] = r.infeasible;
  if (r.infeasible) j["failure"] = r.failure;
  Json xs = Json::array(), ns = Json::array(), us = Json::array(), ws = Json::array();
  for (const auto& x : tr.stochastic_states) xs.push_back(num_array(x));
  for (const auto& x : tr.nominal_states) ns.push_back(num_array(x));
  for (const auto& u : tr.inputs) us.push_back(num_array(u));
  for (const auto& w : tr.noises) ws.push_back(num_array(w));
  j["stochastic_states"] = xs;
  j["nominal_states"] = ns;
  j["inputs"] = us;
  j["noises"] = ws;
  j["deviations"] = num_array(tr.deviations);
  j["stochastic_costs"] = num_array(tr.stochastic_costs);
  j["nominal_costs"] = num_array(tr.nominal_costs);
  Json safe = Json::array();
  for (bool s : tr.safe) safe.push_back(s);
  j["safe"] = safe;
  Json diags = Json::array();
  for (const auto& d : tr.diagnostics) {
    diags.push_back({{"feasible", d.feasible},
                     {"used_fallback", d.used_fallback},
                     {"objective", num(d.objective)},
                     {"iterations", d.iterations}});
  }
  j["diagnostics"] = diags;
  return j;
}

inline Json interval_json(const Interval& i) { return {{"lower", num(i.lower)}, {"upper", num(i.upper)}}; }

struct RunOutcome {
  int exit_code = exit_ok;
  std::string status;
  MonteCarloReport report;
  NominalChecks nominal;
  std::optional<BaselineResult> baseline;
  TubeSchedule schedule;
  double cost_gap_bound_value = 0.0;
  std::optional<double> cost_lipschitz;
  Json manifest;
  Json report_json;
};

/// Runs a scenario end to end and writes manifest.json, report.json,
/// traces.jsonl and series_*.csv into `opts.out_dir`.
inline RunOutcome run_scenario(const Scenario& s, const RunOptions& opts) {
  namespace fs = std::filesystem;
  const auto started = std::chrono::steady_clock::now();
  fs::create_directories(opts.out_dir);
  RunOutcome out;
  const std::string hash = scenario_hash(s.text);
  const std::string provenance = "scenario=" + s.name + " hash=" + hash;
  const int horizon = opts.full_horizon && s.full_horizon ? *s.full_horizon : s.horizon;
  const std::size_t runs = opts.runs.value_or(s.runs);
  const std::uint64_t seed = opts.seed.value_or(s.seed);
  const int parallelism = opts.parallelism.value_or(s.parallelism);
  const std::size_t keep_traces = opts.subsample_traces.value_or(s.subsample_traces);
  require(runs >= 1, "--runs must be >= 1");
  require(parallelism >= 1, "--parallelism must be >= 1");

  const Plant plant = s.make_plant();
  const TubeParams tp = s.tube_params(horizon, plant);
  out.schedule = tube_schedule(tp);
  const MpcConfig config = s.mpc_config(plant);
  const NoiseModel noise = s.noise.model();

  Json& man = out.manifest;
  man["tool"] = "sempc";
  man["version"] = kVersion;
  man["command"] = opts.command_line;
  man["scenario"] = {{"name", s.name}, {"source", s.source}, {"hash", hash}};
  man["scenario_text"] = s.text;
  man["resolved"] = scenario_json(s);
  man["defaulted"] = s.defaulted;
  man["overrides"] = {{"horizon", horizon}, {"runs", runs}, {"seed", seed}, {"parallelism", parallelism},
                      {"subsample_traces", keep_traces}, {"full_horizon", opts.full_horizon}};
  man["seeds"] = {{"base", seed}, {"derivation", "run i uses splitmix64(splitmix64(base) ^ (i*0xD1B54A32D192ED03+1))"}};
  man["tube"] = {{"sigma", num(tp.sigma)},         {"lipschitz", num(tp.lipschitz)},
                 {"lipschitz_certified", plant.lipschitz_certified()},
                 {"state_dim", tp.state_dim},      {"delta", num(tp.delta)},
                 {"horizon", tp.horizon},          {"epsilon", num(tp.epsilon)},
                 {"delta_t", tp.delta_t},          {"branch", tp.lipschitz < 1.0 ? "L<1" : "L>=1"},
                 {"max_radius", num(out.schedule.max_radius())}};

  auto finish = [&](int code, const std::string& status) {
    out.exit_code = code;
    out.status = status;
    man["status"] = status;
    man["exit_code"] = code;
    man["wall_seconds"] =
        num(std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    write_json(opts.out_dir / "manifest.json", man);
    return out;
  };

  // radii
  {
    CsvTable radii({"t[step]", "radius[state-norm]"}, provenance);
    for (int t = 0; t <= horizon; ++t) radii.row({std::to_string(t), fmt12(out.schedule.at(t))});
    radii.write(opts.out_dir / "series_radii.csv");
  }

  // terminal set certificate, fail fast
  const Box free_range = Box::symmetric(plant.state_dim(), std::numbers::pi);
  const auto cert = certify_terminal_set(plant, s.safe_set, out.schedule, config, free_range, s.certify_samples,
                                         derive_seed(seed, 0xCE27ULL));
  man["terminal_certificate"] = {{"invariant", cert.invariant},
                                 {"inside_eroded_set", cert.inside_eroded_set},
                                 {"samples", cert.samples},
                                 {"detail", cert.detail}};
  if (!cert.ok()) return finish(exit_validation, "terminal set certificate failed: " + cert.detail);

  if (s.stabilizer_baseline) {
    out.baseline = stabilizer_baseline(plant, s.safe_set, out.schedule, s.initial_state);
    CsvTable base({"t[step]", "nominal_state[state]", "signed_margin[position]", "radius[state-norm]",
                   "in_eroded_set[bool]"},
                  provenance);
    for (int t = 0; t <= horizon; ++t) {
      const auto& x = out.baseline->trace.nominal_states[static_cast<std::size_t>(t)];
      std::string state;
      for (Eigen::Index i = 0; i < x.size(); ++i) state += (i ? " " : "") + fmt12(x[i]);
      base.row({std::to_string(t), state, fmt12(signed_margin(s.safe_set, x)), fmt12(out.schedule.at(t)),
                is_member_eroded(s.safe_set, x, out.schedule.at(t)) ? "1" : "0"});
    }
    base.write(opts.out_dir / "series_baseline.csv");
  }

  // Monte Carlo
  std::ofstream traces(opts.out_dir / "traces.jsonl");
  if (!traces) throw Error("cannot write traces.jsonl");
  NominalChecks& nc = out.nominal;
  out.report = monte_carlo(plant, s.safe_set, out.schedule, config, s.initial_state, noise, horizon, runs, seed,
                           parallelism, [&](const RunRecord& r) {
                             if (!r.infeasible) {
                               ++nc.runs_checked;
                               if (nominal_in_eroded_set(r.trace, s.safe_set, out.schedule)) ++nc.nominal_in_eroded_set;
                               if (config.terminal_set.contains(r.trace.nominal_states.back())) ++nc.terminal_reached;
                             }
                             if (r.index < keep_traces) traces << trace_json(r).dump() << "\n";
                           });
  traces.close();
  const auto& rep = out.report;

  // series
  {
    CsvTable dev({"t[step]", "mean_sq_deviation[state-norm^2]", "standard_error[state-norm^2]",
                  "bound[state-norm^2]", "radius[state-norm]", "runs"},
                 provenance);
    for (int t = 0; t <= horizon; ++t) {
      const auto& st = rep.sq_deviation[static_cast<std::size_t>(t)];
      dev.row({std::to_string(t), fmt12(st.mean), fmt12(st.standard_error()),
               fmt12(mean_sq_deviation_bound(tp.sigma, tp.lipschitz, tp.state_dim, t)), fmt12(out.schedule.at(t)),
               std::to_string(st.count)});
    }
    dev.write(opts.out_dir / "series_deviation.csv");
    CsvTable cost({"t[step]", "mean_stochastic_cost[cost]", "se_stochastic_cost[cost]", "mean_nominal_cost[cost]",
                   "se_nominal_cost[cost]", "runs"},
                  provenance);
    for (int t = 0; t <= horizon; ++t) {
      const auto& a = rep.stochastic_cost[static_cast<std::size_t>(t)];
      const auto& b = rep.nominal_cost[static_cast<std::size_t>(t)];
      cost.row({std::to_string(t), fmt12(a.mean), fmt12(a.standard_error()), fmt12(b.mean),
                fmt12(b.standard_error()), std::to_string(a.count)});
    }
    cost.write(opts.out_dir / "series_cost.csv");
  }

  out.cost_lipschitz = config.costs.state_lipschitz;
  Json& rj = out.report_json;
  rj["scenario"] = {{"name", s.name}, {"hash", hash}};
  rj["num_runs"] = rep.num_runs;
  rj["horizon"] = horizon;
  rj["delta"] = num(tp.delta);
  rj["safe_runs"] = rep.safe_runs;
  rj["trajectory_safety_rate"] = num(rep.trajectory_safety_rate);
  rj["safety_wilson95"] = interval_json(rep.safety_interval);
  rj["contained_runs"] = rep.contained_runs;
  rj["tube_containment_rate"] = num(rep.tube_containment_rate);
  rj["containment_wilson95"] = interval_json(rep.containment_interval);
  rj["infeasible_runs"] = rep.infeasible_runs;
  Json failures = Json::array();
  for (const auto& [i, msg] : rep.failures) failures.push_back({{"run", i}, {"failure", msg}});
  rj["failures"] = failures;
  rj["nominal_checks"] = {{"runs_checked", nc.runs_checked},
                          {"nominal_in_eroded_set", nc.nominal_in_eroded_set},
                          {"terminal_reached", nc.terminal_reached}};
  Json msd = Json::array();
  for (int t = 0; t <= horizon; ++t) {
    const auto& st = rep.sq_deviation[static_cast<std::size_t>(t)];
    msd.push_back({{"t", t},
                   {"mean", num(st.mean)},
                   {"standard_error", num(st.standard_error())},
                   {"bound", num(mean_sq_deviation_bound(tp.sigma, tp.lipschitz, tp.state_dim, t))}});
  }
  rj["mean_sq_deviation"] = msd;
  Json gap;
  gap["mean"] = num(rep.cost_gap.mean);
  gap["standard_error"] = num(rep.cost_gap.standard_error());
  gap["mean_abs"] = num(rep.abs_cost_gap.mean);
  gap["mean_nominal_cost"] = num(rep.nominal_total_cost.mean);
  if (out.cost_lipschitz) {
    out.cost_gap_bound_value = cost_gap_bound(tp.sigma, tp.lipschitz, tp.state_dim, *out.cost_lipschitz, horizon);
    gap["cost_lipschitz"] = num(*out.cost_lipschitz);
    gap["bound"] = num(out.cost_gap_bound_value);
  } else {
    gap["bound"] = nullptr;
  }
  rj["cost_gap"] = gap;
  rj["solver"] = {{"steps", rep.solver_steps}, {"fallback_steps", rep.fallback_steps}};
  // Timing lives in the manifest so that the report is reproducible byte for byte.
  man["timing"] = {{"mean_solve_seconds",
                    num(rep.solver_steps ? rep.solve_seconds / static_cast<double>(rep.solver_steps) : 0.0)}};
  if (out.baseline) {
    rj["stabilizer_baseline"] = {{"eroded_set_violations", out.baseline->eroded_violations},
                                 {"first_violation", out.baseline->first_violation
                                                         ? Json(*out.baseline->first_violation)
                                                         : Json(nullptr)},
                                 {"safe_set_violations", out.baseline->safe_set_violations}};
  }
  // The guarantee is missed when even the upper Wilson bound is below 1 - delta.
  const bool threshold_met = rep.safety_interval.upper >= 1.0 - tp.delta;
  rj["threshold"] = {{"target_safety", num(1.0 - tp.delta)}, {"met", threshold_met}};
  write_json(opts.out_dir / "report.json", rj);

  if (rep.infeasible_runs > 0)
    return finish(exit_infeasible, std::to_string(rep.infeasible_runs) + " run(s) hit an infeasible MPC program");
  if (!threshold_met) return finish(exit_threshold, "safety rate below 1 - delta");
  return finish(exit_ok, "ok");
}

/// Reloads the scenario and overrides recorded in a manifest so the run can
/// be repeated exactly.
inline std::pair<Scenario, RunOptions> scenario_from_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ScenarioError(path, -1, -1, "cannot open file");
  Json man;
  try {
    man = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ScenarioError(path, -1, -1, e.what());
  }
  if (!man.contains("scenario_text") || !man.contains("overrides"))
    throw ScenarioError(path, -1, -1, "not a result manifest");
  Scenario s = parse_scenario(man["scenario_text"].get<std::string>(), man["scenario"]["source"].get<std::string>());
  RunOptions o;
  const auto& ov = man["overrides"];
  o.runs = ov["runs"].get<std::size_t>();
  o.seed = ov["seed"].get<std::uint64_t>();
  o.parallelism = ov["parallelism"].get<int>();
  o.subsample_traces = ov["subsample_traces"].get<std::size_t>();
  o.full_horizon = ov["full_horizon"].get<bool>();
  return {std::move(s), o};
}

// ---------------------------------------------------------------------------
// compare-radii
// ---------------------------------------------------------------------------

struct RadiusComparison {
  double delta = 0.0;
  double max_radius = 0.0;
  double sqrt_log_inv_delta = 0.0;
  double scaling_constant = 0.0;  // max_radius / sqrt(log(1/delta))
  std::optional<double> corridor_width;
  std::optional<bool> corridor_feasible;
  std::optional<double> baseline;
};

/// max_t r_{delta,t} across a delta grid with the sqrt(log(1/delta)) scaling
/// constant and the corridor feasibility flag (2 r_max + clearance < d_min).
inline std::vector<RadiusComparison> compare_radii(const Scenario& s, const std::vector<double>& deltas,
                                                   double clearance = 0.0,
                                                   const std::optional<Expression>& baseline = std::nullopt,
                                                   std::optional<int> horizon_override = std::nullopt) {
  require(!deltas.empty(), "compare-radii: the delta grid must not be empty");
  require(clearance >= 0.0, "compare-radii: clearance must be >= 0");
  const Plant plant = s.make_plant();
  const int horizon = horizon_override.value_or(s.horizon);
  const auto corridor = min_corridor_width(s.safe_set);
  std::vector<RadiusComparison> out;
  for (double d : deltas) {
    Scenario copy = s;
    copy.delta = d;
    const TubeParams tp = copy.tube_params(horizon, plant);
    const auto sched = tube_schedule(tp);
    RadiusComparison row;
    row.delta = d;
    row.max_radius = sched.max_radius();
    row.sqrt_log_inv_delta = std::sqrt(-std::log(d));
    row.scaling_constant = row.max_radius / row.sqrt_log_inv_delta;
    row.corridor_width = corridor;
    if (corridor) row.corridor_feasible = 2.0 * row.max_radius + clearance < *corridor;
    if (baseline) {
      row.baseline = baseline->evaluate({{"delta", d},
                                         {"T", static_cast<double>(horizon)},
                                         {"n", static_cast<double>(tp.state_dim)},
                                         {"sigma", tp.sigma},
                                         {"L", tp.lipschitz}});
    }
    out.push_back(row);
  }
  return out;
}

inline CsvTable radius_table(const std::vector<RadiusComparison>& rows, const std::string& provenance) {
  const bool has_baseline = !rows.empty() && rows.front().baseline.has_value();
  std::vector<std::string> header{"delta[prob]",          "max_radius[state-norm]", "sqrt_log_inv_delta[1]",
                                  "scaling_constant[state-norm]", "ratio_to_first[1]", "predicted_ratio[1]",
                                  "min_corridor_width[position]", "corridor_feasible[bool]"};
  if (has_baseline) header.push_back("baseline_radius[state-norm]");
  CsvTable t(header, provenance);
  for (const auto& r : rows) {
    std::vector<std::string> cells{fmt12(r.delta),
                                   fmt12(r.max_radius),
                                   fmt12(r.sqrt_log_inv_delta),
                                   fmt12(r.scaling_constant),
                                   fmt12(r.max_radius / rows.front().max_radius),
                                   fmt12(r.sqrt_log_inv_delta / rows.front().sqrt_log_inv_delta),
                                   r.corridor_width ? fmt12(*r.corridor_width) : "",
                                   r.corridor_feasible ? (*r.corridor_feasible ? "1" : "0") : ""};
    if (has_baseline) cells.push_back(fmt12(*r.baseline));
    t.row(cells);
  }
  return t;
}

// ---------------------------------------------------------------------------
// deviation
// ---------------------------------------------------------------------------

struct DeviationOptions {
  std::string plant = "linear";  // linear | tanh
  std::vector<std::string> feedbacks{"none", "saturating", "mpc"};
  double sigma = 0.1;
  int horizon = 20;
  std::size_t runs = 100;
  std::uint64_t seed = 1;
};

struct DeviationResult {
  /// deviations[feedback][run][t] = ||X_t - x_t||
  std::map<std::string, std::vector<std::vector<double>>> deviations;
  /// Linear plants: every feedback reproduced the autonomous recursion exactly.
  std::optional<bool> bit_identical;
  /// Nonlinear plants: worst ||X+ - x+ - w|| / ||X - x|| and the certified L.
  std::optional<double> worst_ratio;
  double lipschitz = 0.0;
  bool contraction_ok = true;
  std::vector<std::vector<double>> reference;  // autonomous recursion norms (linear)
};

struct DeviationPlants {
  Matrix a;
  Matrix b;
  double beta = 0.0;
};

/// The benchmark plants of the deviation experiment.
inline DeviationPlants deviation_plants(const std::string& kind) {
  DeviationPlants p;
  p.a.resize(2, 2);
  p.b.resize(2, 1);
  p.b << 0.0, 1.0;
  if (kind == "linear") {
    p.a << 0.9, 0.3, -0.2, 0.8;
  } else if (kind == "tanh") {
    p.a << 0.5, 0.2, -0.1, 0.4;
    p.beta = 0.3;
  } else {
    throw InvalidParameter("deviation: plant must be 'linear' or 'tanh', got '" + kind + "'");
  }
  return p;
}

namespace detail {

/// Obstacle-free MPC pieces for the deviation experiment.
struct DeviationMpc {
  SafeSet safe_set;
  TubeSchedule schedule;
  MpcConfig config;
};

inline DeviationMpc deviation_mpc(const Plant& plant, double sigma, int horizon) {
  DeviationMpc m;
  TubeParams tp;
  tp.sigma = sigma;
  tp.lipschitz = plant.lipschitz();
  tp.state_dim = plant.state_dim();
  tp.delta = 0.05;
  tp.horizon = horizon;
  m.schedule = tube_schedule(tp);
  m.config.window = 5;
  m.config.terminal_set.center = Vector::Zero(plant.state_dim());
  m.config.terminal_set.radius = 1e6;
  m.config.terminal_controller = zero_input_controller(plant.input_dim());
  m.config.costs = quadratic_cost(Matrix::Identity(plant.state_dim(), plant.state_dim()),
                                  0.1 * Matrix::Identity(plant.input_dim(), plant.input_dim()),
                                  Matrix::Identity(plant.state_dim(), plant.state_dim()));
  m.config.solver.max_iterations = 50;
  return m;
}

inline Feedback saturating_feedback(const Plant& plant) {
  // u = clamp(-K X) with a fixed gain that saturates for moderate states
  Matrix k = Matrix::Constant(plant.input_dim(), plant.state_dim(), 0.5);
  return [k, &plant](int, const Vector& X, const Vector&) { return plant.input_set().clamp(-k * X * 10.0); };
}

}  // namespace detail

inline DeviationResult run_deviation_experiment(const DeviationOptions& o) {
  require(o.horizon >= 1, "deviation: horizon must be >= 1");
  require(o.runs >= 1, "deviation: runs must be >= 1");
  require(o.sigma >= 0.0, "deviation: sigma must be >= 0");
  for (const auto& f : o.feedbacks)
    require(f == "none" || f == "saturating" || f == "mpc", "deviation: unknown feedback '" + f + "'");
  const auto pp = deviation_plants(o.plant);
  const Box uset = Box::symmetric(1, 1.0);
  const NoiseModel noise = o.sigma > 0.0 ? NoiseModel::gaussian(o.sigma) : NoiseModel::zero();
  const Plant plant = o.plant == "linear" ? make_linear_plant(pp.a, pp.b, uset) : make_tanh_plant(pp.a, pp.beta, pp.b, uset);
  const auto mpc = detail::deviation_mpc(plant, o.sigma, o.horizon);
  DeviationResult res;
  res.lipschitz = plant.lipschitz();
  const Vector x0 = Vector::Constant(plant.state_dim(), 1.0);

  auto make_feedback = [&](const std::string& kind) -> Feedback {
    if (kind == "none") return [&plant](int, const Vector&, const Vector&) { return Vector(Vector::Zero(plant.input_dim())); };
    if (kind == "saturating") return detail::saturating_feedback(plant);
    return mpc_feedback(plant, mpc.safe_set, mpc.schedule, mpc.config);
  };

  if (o.plant == "linear") {
    const auto rplant = make_linear_plant<Rational>(pp.a, pp.b, uset);
    const RationalMatrix ra = to_rational(pp.a);
    bool identical = true;
    for (std::size_t i = 0; i < o.runs; ++i) {
      const auto seed = derive_seed(o.seed, i);
      std::optional<std::vector<RationalVector>> reference;
      for (const auto& kind : o.feedbacks) {
        const auto tr = rollout_pair(rplant, lift_feedback(make_feedback(kind)), noise, to_rational(x0), o.horizon, seed);
        if (!reference) {
          reference = autonomous_deviation(ra, tr.noises);
          std::vector<double> norms;
          for (const auto& e : *reference) norms.push_back(detail::norm_of(e));
          res.reference.push_back(std::move(norms));
        }
        for (std::size_t t = 0; t < tr.deviation_vectors.size(); ++t)
          if (tr.deviation_vectors[t] != (*reference)[t]) identical = false;
        res.deviations[kind].push_back(tr.deviations);
      }
    }
    res.bit_identical = identical;
  } else {
    double worst = 0.0;
    for (std::size_t i = 0; i < o.runs; ++i) {
      const auto seed = derive_seed(o.seed, i);
      for (const auto& kind : o.feedbacks) {
        const auto tr = rollout_pair(plant, make_feedback(kind), noise, x0, o.horizon, seed);
        worst = std::max(worst, worst_contraction_ratio(plant, tr));
        if (!satisfies_contraction(plant, tr, plant.lipschitz())) res.contraction_ok = false;
        res.deviations[kind].push_back(tr.deviations);
      }
    }
    res.worst_ratio = worst;
  }
  return res;
}

inline CsvTable deviation_table(const DeviationOptions& o, const DeviationResult& r, const std::string& provenance) {
  std::vector<std::string> header{"t[step]"};
  for (const auto& f : o.feedbacks) {
    header.push_back("mean_dev_" + f + "[state-norm]");
    header.push_back("mean_sq_dev_" + f + "[state-norm^2]");
  }
  if (!r.reference.empty()) header.push_back("mean_dev_reference[state-norm]");
  CsvTable t(header, provenance);
  for (int step = 0; step <= o.horizon; ++step) {
    const auto ts = static_cast<std::size_t>(step);
    std::vector<std::string> cells{std::to_string(step)};
    for (const auto& f : o.feedbacks) {
      RunningStats a, b;
      for (const auto& run : r.deviations.at(f)) {
        a.add(run[ts]);
        b.add(run[ts] * run[ts]);
      }
      cells.push_back(fmt12(a.mean));
      cells.push_back(fmt12(b.mean));
    }
    if (!r.reference.empty()) {
      RunningStats a;
      for (const auto& run : r.reference) a.add(run[ts]);
      cells.push_back(fmt12(a.mean));
    }
    t.row(cells);
  }
  return t;
}

}  // namespace sempc
