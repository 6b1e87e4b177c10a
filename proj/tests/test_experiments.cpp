#include <sempc/experiments.hpp>

#include <gtest/gtest.h>

#include <fstream>
#include <regex>

using namespace sempc;
namespace fs = std::filesystem;

namespace {

const char* kLinear = R"(name: small
plant:
  kind: linear
  A: [[0.8, 0.1], [0.0, 0.7]]
  B: [[0.0], [1.0]]
  input_bound: 1.0
noise:
  kind: gaussian
  value: 0.05
  parameter: std
safe_set:
  obstacles:
    - disk: {center: [0.0, 3.0], radius: 0.5}
tube:
  delta: 0.05
mpc:
  window: 4
  terminal_set:
    radius: 2.0
  costs:
    kind: l1
horizon: 12
initial_state: [1.5, 0.5]
monte_carlo:
  runs: 40
  seed: 3
  subsample_traces: 5
  certify_samples: 200
)";

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("sempc_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  return s.replace(pos, from.size(), to);
}

}  // namespace

TEST(Format, TwelveSignificantDigits) {
  EXPECT_EQ(fmt12(1.0 / 3.0), "0.333333333333");
  EXPECT_EQ(fmt12(123456789.123456789), "123456789.123");
  EXPECT_EQ(fmt12(1e-20 / 3.0), "3.33333333333e-21");
  EXPECT_EQ(fmt12(std::numeric_limits<double>::infinity()), "inf");
  EXPECT_EQ(num(2.0 / 3.0).dump(), "0.666666666667");
  EXPECT_TRUE(num(std::nan("")).is_string());
}

TEST(RunScenario, WritesAllOutputs) {
  const auto s = parse_scenario(kLinear, "small.yaml");
  RunOptions o;
  o.out_dir = scratch("outputs");
  const auto out = run_scenario(s, o);
  EXPECT_EQ(out.exit_code, exit_ok) << out.status;
  for (const char* f : {"manifest.json", "report.json", "traces.jsonl", "series_radii.csv", "series_deviation.csv",
                        "series_cost.csv"})
    EXPECT_TRUE(fs::exists(o.out_dir / f)) << f;

  const auto man = Json::parse(slurp(o.out_dir / "manifest.json"));
  EXPECT_EQ(man["scenario"]["hash"], scenario_hash(kLinear));
  EXPECT_EQ(man["scenario_text"], kLinear);
  EXPECT_EQ(man["exit_code"], 0);
  EXPECT_EQ(man["seeds"]["base"], 3);
  EXPECT_FALSE(man["defaulted"].empty());

  const auto rep = Json::parse(slurp(o.out_dir / "report.json"));
  EXPECT_EQ(rep["num_runs"], 40);
  EXPECT_EQ(rep["mean_sq_deviation"].size(), 13u);
  EXPECT_TRUE(rep["cost_gap"]["bound"].is_number());

  // traces: one JSON record per line, subsampled
  std::ifstream tr(o.out_dir / "traces.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(tr, line)) {
    const auto j = Json::parse(line);
    EXPECT_EQ(j["run"], lines);
    EXPECT_EQ(j["stochastic_states"].size(), 13u);
    ++lines;
  }
  EXPECT_EQ(lines, 5);

  // CSV: provenance line, headers with units, numbers with at most 12 significant digits
  for (const char* f : {"series_radii.csv", "series_deviation.csv", "series_cost.csv"}) {
    std::ifstream csv(o.out_dir / f);
    std::getline(csv, line);
    EXPECT_EQ(line, "# scenario=small hash=" + scenario_hash(kLinear));
    std::getline(csv, line);
    EXPECT_NE(line.find("t[step]"), std::string::npos);
    const std::regex number(R"(-?(\d+)(\.(\d+))?(e[-+]\d+)?)");
    while (std::getline(csv, line)) {
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        std::smatch m;
        ASSERT_TRUE(std::regex_match(cell, m, number)) << cell;
        std::string digits = m[1].str() + m[3].str();
        digits.erase(0, std::min(digits.find_first_not_of('0'), digits.size()));
        EXPECT_LE(digits.size(), 12u) << cell;
      }
    }
  }
}

TEST(RunScenario, ManifestRoundTripReproducesReport) {
  const auto s = parse_scenario(kLinear, "small.yaml");
  RunOptions o;
  o.out_dir = scratch("roundtrip_a");
  o.seed = 99;
  o.runs = 25;
  ASSERT_EQ(run_scenario(s, o).exit_code, exit_ok);
  auto [s2, o2] = scenario_from_manifest((o.out_dir / "manifest.json").string());
  o2.out_dir = scratch("roundtrip_b");
  ASSERT_EQ(run_scenario(s2, o2).exit_code, exit_ok);
  EXPECT_EQ(slurp(o.out_dir / "report.json"), slurp(o2.out_dir / "report.json"));
  EXPECT_EQ(slurp(o.out_dir / "traces.jsonl"), slurp(o2.out_dir / "traces.jsonl"));
  EXPECT_EQ(slurp(o.out_dir / "series_deviation.csv"), slurp(o2.out_dir / "series_deviation.csv"));
}

TEST(RunScenario, ParallelismDoesNotChangeReport) {
  const auto s = parse_scenario(kLinear, "small.yaml");
  RunOptions a, b;
  a.out_dir = scratch("par1");
  b.out_dir = scratch("par3");
  b.parallelism = 3;
  ASSERT_EQ(run_scenario(s, a).exit_code, exit_ok);
  ASSERT_EQ(run_scenario(s, b).exit_code, exit_ok);
  EXPECT_EQ(slurp(a.out_dir / "report.json"), slurp(b.out_dir / "report.json"));
}

TEST(RunScenario, ZeroNoiseGivesZeroDeviation) {
  const auto s = parse_scenario(replace(replace(kLinear, "kind: gaussian", "kind: zero"), "  parameter: std\n", ""));
  RunOptions o;
  o.out_dir = scratch("zero");
  o.runs = 3;
  const auto out = run_scenario(s, o);
  for (const auto& st : out.report.sq_deviation) EXPECT_EQ(st.mean, 0.0);
}

TEST(RunScenario, CertificateFailureIsValidationError) {
  // terminal ball reaches into the obstacle
  const auto s = parse_scenario(replace(kLinear, "radius: 2.0", "radius: 3.0"));
  RunOptions o;
  o.out_dir = scratch("cert");
  const auto out = run_scenario(s, o);
  EXPECT_EQ(out.exit_code, exit_validation);
  EXPECT_EQ(Json::parse(slurp(o.out_dir / "manifest.json"))["exit_code"], exit_validation);
}

TEST(RunScenario, InfeasibleRunsGetDistinctExitCode) {
  // x0 lies inside the obstacle, away from the terminal ball.
  auto text = replace(kLinear, "center: [0.0, 3.0], radius: 0.5", "center: [3.0, 3.2], radius: 0.5");
  const auto s = parse_scenario(replace(text, "initial_state: [1.5, 0.5]", "initial_state: [3.0, 3.0]"));
  RunOptions o;
  o.out_dir = scratch("infeasible");
  const auto out = run_scenario(s, o);
  EXPECT_EQ(out.exit_code, exit_infeasible);
  EXPECT_EQ(out.report.infeasible_runs, 40u);
  EXPECT_EQ(out.report.safe_runs, 0u);
}

TEST(RunScenario, SafetyMissGetsThresholdExitCode) {
  // Safety constraints off and an obstacle across the path: every run is unsafe.
  auto text = replace(kLinear, "  window: 4", "  window: 4\n  enforce_safety: false");
  text = replace(text, "center: [0.0, 3.0], radius: 0.5", "center: [0.6, 0.3], radius: 0.3");
  const auto s = parse_scenario(text);
  RunOptions o;
  o.out_dir = scratch("threshold");
  const auto out = run_scenario(s, o);
  EXPECT_EQ(out.exit_code, exit_threshold) << out.status;
}

TEST(CompareRadii, MonotoneAndFeasibilityFlag) {
  const std::string text = replace(kLinear, "    - disk: {center: [0.0, 3.0], radius: 0.5}",
                                   "    - disk: {center: [0.0, 3.0], radius: 0.5}\n"
                                   "    - disk: {center: [0.0, 8.0], radius: 0.5}");
  const auto s = parse_scenario(text);
  const auto rows = compare_radii(s, {1e-2, 1e-4, 1e-6});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_LT(rows[0].max_radius, rows[1].max_radius);
  EXPECT_LT(rows[1].max_radius, rows[2].max_radius);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.corridor_width);
    EXPECT_NEAR(*r.corridor_width, 4.0, 1e-12);
    EXPECT_EQ(*r.corridor_feasible, 2 * r.max_radius < 4.0);
  }
  // The flag flips exactly at 2 r + clearance = d_min.
  const double r = rows[1].max_radius;
  EXPECT_TRUE(*compare_radii(s, {1e-4}, 4.0 - 2 * r - 1e-9)[0].corridor_feasible);
  EXPECT_FALSE(*compare_radii(s, {1e-4}, 4.0 - 2 * r + 1e-9)[0].corridor_feasible);
  const auto with_base = compare_radii(s, {1e-2}, 0.0, Expression("2 * sigma"));
  EXPECT_NEAR(*with_base[0].baseline, 0.1, 1e-15);
  EXPECT_THROW(compare_radii(s, {}), InvalidParameter);
}

TEST(Deviation, LinearIsBitIdentical) {
  DeviationOptions o;
  o.runs = 5;
  o.horizon = 15;
  const auto r = run_deviation_experiment(o);
  ASSERT_TRUE(r.bit_identical);
  EXPECT_TRUE(*r.bit_identical);
  EXPECT_EQ(r.deviations.at("none"), r.deviations.at("saturating"));
  EXPECT_EQ(r.deviations.at("none"), r.deviations.at("mpc"));
}

TEST(Deviation, NonlinearSatisfiesContraction) {
  DeviationOptions o;
  o.plant = "tanh";
  o.runs = 5;
  const auto r = run_deviation_experiment(o);
  EXPECT_TRUE(r.contraction_ok);
  ASSERT_TRUE(r.worst_ratio);
  EXPECT_LE(*r.worst_ratio, r.lipschitz);
  EXPECT_NE(r.deviations.at("none"), r.deviations.at("saturating"));
}

TEST(Deviation, ZeroNoiseGivesZeroColumns) {
  DeviationOptions o;
  o.sigma = 0.0;
  o.runs = 2;
  const auto r = run_deviation_experiment(o);
  for (const auto& [k, runs] : r.deviations)
    for (const auto& run : runs)
      for (double d : run) EXPECT_EQ(d, 0.0);
}

TEST(Deviation, RejectsUnknownKinds) {
  DeviationOptions o;
  o.plant = "cubic";
  EXPECT_THROW(run_deviation_experiment(o), InvalidParameter);
  o.plant = "linear";
  o.feedbacks = {"bang-bang"};
  EXPECT_THROW(run_deviation_experiment(o), InvalidParameter);
}
