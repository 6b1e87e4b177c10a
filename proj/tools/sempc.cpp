// sempc: command-line front end for scenario runs and experiments.

#include <sempc/experiments.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace sempc;

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

void print_run_summary(const RunOutcome& o) {
  const auto& r = o.report;
  std::cout << "status: " << o.status << "\n"
            << "runs: " << r.num_runs << "  infeasible: " << r.infeasible_runs << "\n"
            << "trajectory safety rate: " << fmt12(r.trajectory_safety_rate) << "  wilson95 ["
            << fmt12(r.safety_interval.lower) << ", " << fmt12(r.safety_interval.upper) << "]\n"
            << "tube containment rate: " << fmt12(r.tube_containment_rate) << "  wilson95 ["
            << fmt12(r.containment_interval.lower) << ", " << fmt12(r.containment_interval.upper) << "]\n"
            << "nominal in eroded set: " << o.nominal.nominal_in_eroded_set << "/" << o.nominal.runs_checked
            << "  terminal reached: " << o.nominal.terminal_reached << "/" << o.nominal.runs_checked << "\n"
            << "max tube radius: " << fmt12(o.schedule.max_radius()) << "\n"
            << "mean cost gap: " << fmt12(r.cost_gap.mean) << " +- " << fmt12(r.cost_gap.standard_error());
  if (o.cost_lipschitz) std::cout << "  bound " << fmt12(o.cost_gap_bound_value);
  std::cout << "\n";
  if (o.baseline)
    std::cout << "stabilizer baseline eroded-set violations: " << o.baseline->eroded_violations << "\n";
  std::cout << "solver steps: " << r.solver_steps << "  fallback steps: " << r.fallback_steps << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Set-erosion stochastic MPC under sub-Gaussian noise"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Monte Carlo closed-loop run of a scenario (or of a result manifest)");
  std::string run_path;
  RunOptions run_opts;
  std::uint64_t seed = 0;
  std::size_t runs = 0, subsample = 0;
  int parallelism = 0;
  bool from_manifest = false;
  run->add_option("scenario", run_path, "Scenario YAML, or manifest.json with --from-manifest")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Base seed");
  auto* runs_opt = run->add_option("--runs", runs, "Number of Monte Carlo runs")->check(CLI::PositiveNumber);
  auto* par_opt = run->add_option("--parallelism", parallelism, "Worker threads")->check(CLI::PositiveNumber);
  auto* sub_opt = run->add_option("--subsample-traces", subsample, "Number of full traces to write");
  run->add_option("--out", run_opts.out_dir, "Output directory")->capture_default_str();
  run->add_flag("--full-horizon", run_opts.full_horizon, "Use the scenario's full_horizon");
  run->add_flag("--from-manifest", from_manifest, "Repeat the run recorded in a manifest.json");

  // compare-radii
  auto* cmp = app.add_subcommand("compare-radii", "Max tube radius across a delta grid");
  std::string cmp_path;
  std::vector<double> deltas{1e-2, 1e-3, 1e-4, 1e-5, 1e-6};
  double clearance = 0.0;
  std::string baseline_expr;
  std::filesystem::path cmp_out;
  cmp->add_option("scenario", cmp_path, "Scenario YAML")->required();
  cmp->add_option("--deltas", deltas, "Failure probabilities")->delimiter(',')->capture_default_str();
  cmp->add_option("--clearance", clearance, "Extra clearance required in the narrowest corridor");
  cmp->add_option("--baseline", baseline_expr,
                  "Radius formula for comparison; variables delta, T, n, sigma, L");
  cmp->add_option("--out", cmp_out, "Directory for series_compare_radii.csv");

  // deviation
  auto* dev = app.add_subcommand("deviation", "Deviation dynamics under different feedback laws with shared noise");
  DeviationOptions dev_opts;
  std::filesystem::path dev_out;
  dev->add_option("--plant", dev_opts.plant, "linear or tanh")->capture_default_str();
  dev->add_option("--feedback", dev_opts.feedbacks, "none, saturating, mpc")->delimiter(',');
  dev->add_option("--sigma", dev_opts.sigma, "Noise standard deviation")->capture_default_str();
  dev->add_option("--horizon", dev_opts.horizon, "Steps")->capture_default_str();
  dev->add_option("--runs", dev_opts.runs, "Noise sequences")->capture_default_str();
  dev->add_option("--seed", dev_opts.seed, "Base seed")->capture_default_str();
  dev->add_option("--out", dev_out, "Directory for series_deviation.csv");

  // validate
  auto* val = app.add_subcommand("validate", "Parse and validate a scenario without running it");
  std::string val_path;
  val->add_option("scenario", val_path, "Scenario YAML")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_validation;
  }

  try {
    if (*run) {
      Scenario s;
      if (from_manifest) {
        auto [sc, o] = scenario_from_manifest(run_path);
        s = std::move(sc);
        o.out_dir = run_opts.out_dir;
        run_opts = o;
      } else {
        s = load_scenario(run_path);
      }
      if (*seed_opt) run_opts.seed = seed;
      if (*runs_opt) run_opts.runs = runs;
      if (*par_opt) run_opts.parallelism = parallelism;
      if (*sub_opt) run_opts.subsample_traces = subsample;
      run_opts.command_line = join_args(argc, argv);
      const auto outcome = run_scenario(s, run_opts);
      print_run_summary(outcome);
      std::cout << "results: " << run_opts.out_dir.string() << "\n";
      return outcome.exit_code;
    }
    if (*cmp) {
      const Scenario s = load_scenario(cmp_path);
      std::optional<Expression> expr;
      if (!baseline_expr.empty()) expr.emplace(baseline_expr);
      const auto rows = compare_radii(s, deltas, clearance, expr);
      const auto table = radius_table(rows, "scenario=" + s.name + " hash=" + scenario_hash(s.text));
      std::cout << table.str();
      if (!cmp_out.empty()) {
        std::filesystem::create_directories(cmp_out);
        table.write(cmp_out / "series_compare_radii.csv");
      }
      return exit_ok;
    }
    if (*dev) {
      const auto res = run_deviation_experiment(dev_opts);
      const auto table = deviation_table(dev_opts, res, "experiment=deviation plant=" + dev_opts.plant);
      std::cout << table.str();
      if (res.bit_identical) std::cout << "bit-identical deviations: " << (*res.bit_identical ? "yes" : "no") << "\n";
      if (res.worst_ratio)
        std::cout << "worst contraction ratio: " << fmt12(*res.worst_ratio) << " (L = " << fmt12(res.lipschitz)
                  << ", " << (res.contraction_ok ? "holds" : "violated") << ")\n";
      if (!dev_out.empty()) {
        std::filesystem::create_directories(dev_out);
        table.write(dev_out / "series_deviation.csv");
      }
      const bool ok = res.bit_identical.value_or(true) && res.contraction_ok;
      return ok ? exit_ok : exit_threshold;
    }
    if (*val) {
      const Scenario s = load_scenario(val_path);
      const Plant plant = s.make_plant();
      const auto sched = tube_schedule(s.tube_params(s.horizon, plant));
      std::cout << "ok: " << s.name << " (hash " << scenario_hash(s.text) << ")\n"
                << "plant: " << s.plant.kind << ", n = " << plant.state_dim() << ", L = " << fmt12(plant.lipschitz())
                << (plant.lipschitz_certified() ? " (certified)" : " (declared)") << "\n"
                << "max tube radius over " << s.horizon << " steps: " << fmt12(sched.max_radius()) << "\n";
      if (!s.defaulted.empty()) {
        std::cout << "defaulted:";
        for (const auto& k : s.defaulted) std::cout << " " << k;
        std::cout << "\n";
      }
      return exit_ok;
    }
  } catch (const ScenarioError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_validation;
  } catch (const InvalidParameter& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_validation;
  } catch (const InfeasibleAtStep& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return exit_infeasible;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return exit_internal;
  }
  return exit_internal;
}
