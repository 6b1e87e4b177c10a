#include <sempc/expression.hpp>
#include <sempc/scenario.hpp>

#include <gtest/gtest.h>

using namespace sempc;

namespace {

const char* kMinimal = R"(name: tiny
plant:
  kind: linear
  A: [[0.8]]
  B: [[1.0]]
  input_bound: 1.0
noise:
  kind: gaussian
  value: 0.01
mpc:
  terminal_set:
    radius: 5.0
horizon: 10
initial_state: [1.0]
)";

int error_line(const std::string& text) {
  try {
    (void)parse_scenario(text, "test.yaml");
  } catch (const ScenarioError& e) {
    return e.line();
  }
  return -2;
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  const auto pos = s.find(from);
  EXPECT_NE(pos, std::string::npos) << from;
  return s.replace(pos, from.size(), to);
}

}  // namespace

TEST(Scenario, MinimalParsesWithDefaults) {
  const auto s = parse_scenario(kMinimal);
  EXPECT_EQ(s.name, "tiny");
  EXPECT_EQ(s.plant.kind, "linear");
  EXPECT_DOUBLE_EQ(s.noise.sigma(), 0.1);  // variance by default
  EXPECT_EQ(s.delta, 1e-3);
  EXPECT_EQ(s.window, 20);
  EXPECT_EQ(s.runs, 1000u);
  const auto has = [&](const std::string& k) {
    return std::find(s.defaulted.begin(), s.defaulted.end(), k) != s.defaulted.end();
  };
  EXPECT_TRUE(has("tube.delta"));
  EXPECT_TRUE(has("mpc.window"));
  EXPECT_TRUE(has("monte_carlo.runs"));
  EXPECT_TRUE(has("mpc.terminal_set.center"));
  EXPECT_FALSE(has("plant.input_bound"));
}

TEST(Scenario, StdParameter) {
  const auto s = parse_scenario(replace(kMinimal, "value: 0.01", "value: 0.01\n  parameter: std"));
  EXPECT_DOUBLE_EQ(s.noise.sigma(), 0.01);
}

TEST(Scenario, UnknownKeyReportsLine) {
  EXPECT_EQ(error_line(replace(kMinimal, "horizon: 10", "horizon: 10\nhorizn: 4")), 13);
  EXPECT_EQ(error_line(replace(kMinimal, "  input_bound: 1.0", "  input_bound: 1.0\n  gain: 3")), 6);
}

TEST(Scenario, BadValueReportsLine) {
  EXPECT_EQ(error_line(replace(kMinimal, "horizon: 10", "horizon: ten")), 12);
  EXPECT_EQ(error_line(replace(kMinimal, "kind: gaussian", "kind: cauchy")), 7);
  EXPECT_EQ(error_line(replace(kMinimal, "value: 0.01", "value: -1")), 8);
}

TEST(Scenario, MissingRequiredKey) {
  EXPECT_GE(error_line(replace(kMinimal, "horizon: 10\n", "")), 0);
  EXPECT_THROW(parse_scenario(replace(kMinimal, "name: tiny\n", "")), ScenarioError);
}

TEST(Scenario, SyntaxErrorReportsLine) {
  // The unclosed sequence is detected at the next key.
  EXPECT_EQ(error_line(replace(kMinimal, "  B: [[1.0]]", "  B: [[1.0]")), 5);
  EXPECT_EQ(error_line(replace(kMinimal, "horizon: 10", "horizon: [10")), 13);
}

TEST(Scenario, CrossFieldValidation) {
  EXPECT_THROW(parse_scenario(replace(kMinimal, "initial_state: [1.0]", "initial_state: [1.0, 2.0]")), ScenarioError);
  EXPECT_THROW(parse_scenario(replace(kMinimal, "horizon: 10", "horizon: 0")), ScenarioError);
  EXPECT_THROW(parse_scenario(replace(kMinimal, "radius: 5.0", "radius: -1")), ScenarioError);
  EXPECT_THROW(parse_scenario(replace(kMinimal, "  B: [[1.0]]", "  B: [[1.0], [2.0]]")), ScenarioError);
  const std::string tube = std::string(kMinimal) + "tube:\n  delta: 2.0\n";
  EXPECT_THROW(parse_scenario(tube), ScenarioError);
}

TEST(Scenario, ObstaclesAndOptimizedTube) {
  const std::string text = std::string(kMinimal) +
                           "safe_set:\n"
                           "  obstacles:\n"
                           "    - disk: {center: [5.0, 0.0], radius: 1.0}\n"
                           "      dims: [0, 0]\n"
                           "tube:\n  epsilon: optimize\n";
  // dims [0, 0] on a scalar plant is invalid
  EXPECT_THROW(parse_scenario(text), ScenarioError);
  const std::string ok = replace(replace(text, "dims: [0, 0]", "dims: [0, 1]"), "A: [[0.8]]", "A: [[0.8, 0], [0, 0.8]]");
  const auto s = parse_scenario(replace(replace(ok, "B: [[1.0]]", "B: [[1.0], [0.0]]"), "[1.0]\n", "[1.0, 0.0]\n"));
  EXPECT_TRUE(s.optimize_tube);
  ASSERT_EQ(s.safe_set.obstacles.size(), 1u);
  EXPECT_TRUE(s.safe_set.obstacles[0].is_disk());
}

TEST(Scenario, HashIsStableAndSensitive) {
  EXPECT_EQ(scenario_hash(kMinimal), scenario_hash(kMinimal));
  EXPECT_NE(scenario_hash(kMinimal), scenario_hash(replace(kMinimal, "0.8", "0.7")));
  EXPECT_EQ(scenario_hash(kMinimal).size(), 16u);
}

TEST(Scenario, ShippedFilesValidate) {
  for (const char* name : {"unicycle", "quadrotor", "scalar_linear", "linear3d"}) {
    const auto s = load_scenario(std::string(SEMPC_SCENARIO_DIR) + "/" + name + ".yaml");
    EXPECT_EQ(s.name, name);
  }
  EXPECT_THROW(load_scenario("/nonexistent.yaml"), ScenarioError);
}

TEST(Expression, Arithmetic) {
  EXPECT_DOUBLE_EQ(Expression("1 + 2 * 3").evaluate({}), 7.0);
  EXPECT_DOUBLE_EQ(Expression("(1 + 2) * 3").evaluate({}), 9.0);
  EXPECT_DOUBLE_EQ(Expression("2 ^ 3 ^ 2").evaluate({}), 512.0);
  EXPECT_DOUBLE_EQ(Expression("-2 ^ 2").evaluate({}), -4.0);
  EXPECT_DOUBLE_EQ(Expression("10 / 4 - 1").evaluate({}), 1.5);
  EXPECT_DOUBLE_EQ(Expression("1e-3 * 2").evaluate({}), 2e-3);
}

TEST(Expression, VariablesAndFunctions) {
  const Expression e("sigma * sqrt(n * T * log(1 / delta)) + max(L, 0) - min(1, 2) + abs(-1) + exp(0) + pow(2, 2)");
  const double got = e.evaluate({{"sigma", 0.1}, {"n", 3}, {"T", 30}, {"delta", 1e-3}, {"L", 0.9}});
  EXPECT_NEAR(got, 0.1 * std::sqrt(90 * std::log(1e3)) + 0.9 - 1 + 1 + 1 + 4, 1e-12);
}

TEST(Expression, Errors) {
  EXPECT_THROW(Expression("1 +"), InvalidParameter);
  EXPECT_THROW(Expression("(1"), InvalidParameter);
  EXPECT_THROW(Expression("foo(1)"), InvalidParameter);
  EXPECT_THROW(Expression("1 2"), InvalidParameter);
  EXPECT_THROW(Expression("x").evaluate({}), InvalidParameter);
}
