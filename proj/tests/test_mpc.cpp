#include "fixtures.hpp"

#include <sempc/mpc.hpp>

#include <gtest/gtest.h>

using namespace sempc;

namespace {

struct LinearProblem {
  Plant plant;
  SafeSet safe_set;
  TubeSchedule schedule;
  MpcConfig config;

  explicit LinearProblem(int window = 2, int horizon = 10) : plant(make_plant()) {
    TubeParams tp;
    tp.sigma = 0.01;
    tp.lipschitz = plant.lipschitz();
    tp.state_dim = 2;
    tp.delta = 0.05;
    tp.horizon = horizon;
    schedule = tube_schedule(tp);
    config.window = window;
    config.terminal_set.center = Vector::Zero(2);
    config.terminal_set.radius = 10.0;
    config.terminal_controller = zero_input_controller(1);
    config.costs = quadratic_cost(Matrix::Identity(2, 2), 0.1 * Matrix::Identity(1, 1), Matrix::Identity(2, 2));
    config.solver.convergence_tol = 1e-12;
    config.solver.max_iterations = 2000;
  }

  static Plant make_plant() {
    Matrix A(2, 2), B(2, 1);
    A << 0.9, 0.2, 0.0, 0.95;
    B << 0.0, 1.0;
    return make_linear_plant(A, B, Box::symmetric(1, 1.0));
  }
};

ControllerState start(const Vector& x) {
  ControllerState s;
  s.time = 0;
  s.nominal_state = x;
  return s;
}

}  // namespace

TEST(SolveStep, MatchesExhaustiveGridOnTwoStepWindow) {
  LinearProblem lp;
  Vector x(2);
  x << 2.0, -1.5;
  const auto sol = solve_step(start(x), x, lp.plant, lp.safe_set, lp.schedule, lp.config);
  ASSERT_TRUE(sol.feasible);
  double best = std::numeric_limits<double>::infinity();
  const int G = 400;
  for (int i = 0; i <= G; ++i) {
    for (int j = 0; j <= G; ++j) {
      std::vector<Vector> us{Vector::Constant(1, -1.0 + 2.0 * i / G), Vector::Constant(1, -1.0 + 2.0 * j / G)};
      best = std::min(best, objective_value(lp.config, 0, rollout(lp.plant, x, us), us));
    }
  }
  EXPECT_LE(sol.objective, best + 1e-9);
  // Grid resolution 0.005 bounds how far below the grid the optimum can be.
  EXPECT_GE(sol.objective, best - 1e-2);
  for (std::size_t k = 1; k < sol.predicted_nominal.size(); ++k)
    EXPECT_LT(sol.predicted_nominal[k].norm(), sol.predicted_nominal[k - 1].norm());
}

TEST(SolveStep, PredictionsStartAtMeasuredAndNominal) {
  LinearProblem lp(4);
  Vector X(2), x(2);
  X << 1.0, 1.0;
  x << 0.9, 1.1;
  auto st = start(x);
  const auto sol = solve_step(st, X, lp.plant, lp.safe_set, lp.schedule, lp.config);
  EXPECT_EQ(sol.predicted_ce.front(), X);
  EXPECT_EQ(sol.predicted_nominal.front(), x);
  EXPECT_EQ(sol.inputs.size(), 4u);
  for (const auto& u : sol.inputs) EXPECT_TRUE(lp.plant.input_set().contains(u));
}

TEST(SolveStep, WindowShrinksAtHorizonEnd) {
  LinearProblem lp(5, 10);
  EXPECT_EQ(effective_window(lp.config, 7, 10), 3);
  Vector x(2);
  x << 0.3, 0.1;
  ControllerState st;
  st.time = 8;
  st.nominal_state = x;
  const auto sol = solve_step(st, x, lp.plant, lp.safe_set, lp.schedule, lp.config);
  EXPECT_EQ(sol.inputs.size(), 2u);
  EXPECT_EQ(sol.predicted_nominal.size(), 3u);
  st.time = 10;
  EXPECT_THROW(solve_step(st, x, lp.plant, lp.safe_set, lp.schedule, lp.config), InvalidParameter);
}

TEST(SolveStep, MeritNonincreasingWithinEachPhase) {
  fixture::UnicycleProblem up;
  const auto sol = solve_step(start(up.x0), up.x0, up.plant, up.safe_set, up.schedule, up.config);
  ASSERT_FALSE(sol.merit_history.empty());
  for (const auto& phase : sol.merit_history)
    for (std::size_t i = 1; i < phase.size(); ++i) EXPECT_LE(phase[i], phase[i - 1]);
}

TEST(SolveStep, InfeasibleAtInitialCondition) {
  fixture::UnicycleProblem up;
  Vector x(3);
  x << 2.0, 1.9, 0.0;  // 0.2 from an obstacle center
  try {
    (void)solve_step(start(x), x, up.plant, up.safe_set, up.schedule, up.config);
    FAIL() << "expected InfeasibleAtStep";
  } catch (const InfeasibleAtStep& e) {
    EXPECT_EQ(e.k(), 0);
    EXPECT_EQ(e.time(), 0);
    EXPECT_EQ(e.constraint(), "eroded_safe_set");
    EXPECT_LT(e.margin(), 0.0);
  }
}

TEST(SolveStep, OptimizerDisabledReturnsShiftedCandidate) {
  fixture::UnicycleProblem up;
  auto st = start(up.x0);
  const auto first = solve_step(st, up.x0, up.plant, up.safe_set, up.schedule, up.config);
  ASSERT_TRUE(first.feasible);
  auto cfg = up.config;
  cfg.solver.max_iterations = 0;
  st.time = 1;
  st.nominal_state = first.predicted_nominal[1];
  st.last_solution = first;
  const auto next = solve_step(st, st.nominal_state, up.plant, up.safe_set, up.schedule, cfg);
  EXPECT_TRUE(next.feasible);
  EXPECT_TRUE(next.used_fallback);
  const auto cand = shifted_candidate(up.plant, cfg, first, up.horizon);
  ASSERT_EQ(next.inputs.size(), cand.size());
  for (std::size_t k = 0; k < cand.size(); ++k) EXPECT_EQ(next.inputs[k], cand[k]);
}

TEST(RecursiveFeasibility, HoldsOnEveryFeasibleStep) {
  fixture::UnicycleProblem up;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<MpcSolution> sols;
    (void)run_receding_horizon(up.plant, up.safe_set, up.schedule, up.config, up.x0, up.noise, up.horizon, seed,
                               &sols);
    ASSERT_EQ(sols.size(), static_cast<std::size_t>(up.horizon));
    for (std::size_t t = 0; t < sols.size(); ++t) {
      ASSERT_TRUE(sols[t].feasible);
      EXPECT_TRUE(verify_recursive_feasibility(up.plant, up.safe_set, up.schedule, up.config, sols[t],
                                               static_cast<int>(t)));
    }
  }
}

TEST(RecursiveFeasibility, CorruptedTerminalControllerFails) {
  fixture::UnicycleProblem up;
  const auto sol = solve_step(start(up.x0), up.x0, up.plant, up.safe_set, up.schedule, up.config);
  ASSERT_TRUE(sol.feasible);
  // Push the final predicted state out of the terminal ball.
  auto bad = up.config;
  bad.terminal_controller = [](const Vector&) {
    Vector u(2);
    u << 2.0, 0.0;
    return u;
  };
  MpcSolution at_end = sol;
  // Make the shift append several terminal-controller steps.
  at_end.inputs.resize(10);
  at_end.predicted_nominal = rollout(up.plant, up.x0, at_end.inputs);
  at_end.predicted_ce = at_end.predicted_nominal;
  EXPECT_FALSE(verify_recursive_feasibility(up.plant, up.safe_set, up.schedule, bad, at_end, 0));
}

TEST(TerminalSet, CertificateForUnicycle) {
  fixture::UnicycleProblem up;
  const auto cert =
      certify_terminal_set(up.plant, up.safe_set, up.schedule, up.config, Box::symmetric(3, std::numbers::pi), 2000, 1);
  EXPECT_TRUE(cert.ok()) << cert.detail;
}

TEST(TerminalSet, CertificateRejectsSetOverlappingErodedObstacles) {
  fixture::UnicycleProblem up;
  auto cfg = up.config;
  cfg.terminal_set.center = Vector(2);
  cfg.terminal_set.center << 2.0, 1.0;
  const auto cert =
      certify_terminal_set(up.plant, up.safe_set, up.schedule, cfg, Box::symmetric(3, std::numbers::pi), 500, 1);
  EXPECT_FALSE(cert.inside_eroded_set);
}

TEST(TerminalSet, WeightedDistance) {
  TerminalSet ts;
  ts.center = Vector::Zero(2);
  ts.radius = 1.0;
  ts.weight = Matrix::Identity(2, 2) * 4.0;
  Vector x(2);
  x << 0.5, 0.0;
  EXPECT_NEAR(ts.distance(x), 1.0, 1e-15);
  EXPECT_TRUE(ts.contains(x));
  ts.weight(0, 1) = 1.0;
  EXPECT_THROW(ts.validate(2), InvalidParameter);
}

TEST(ClosedLoop, NominalTrajectoryReplaysBitExactly) {
  fixture::UnicycleProblem up;
  const auto tr = run_receding_horizon(up.plant, up.safe_set, up.schedule, up.config, up.x0, up.noise, up.horizon, 4);
  Vector x = up.x0;
  for (int t = 0; t < up.horizon; ++t) {
    x = step_nominal(up.plant, x, tr.inputs[t]);
    EXPECT_EQ(x, tr.nominal_states[t + 1]);
  }
}

TEST(ClosedLoop, ZeroNoiseTrajectoriesCoincide) {
  fixture::UnicycleProblem up;
  const auto tr =
      run_receding_horizon(up.plant, up.safe_set, up.schedule, up.config, up.x0, NoiseModel::zero(), up.horizon, 4);
  for (int t = 0; t <= up.horizon; ++t) EXPECT_EQ(tr.stochastic_states[t], tr.nominal_states[t]);
}

TEST(ClosedLoop, ErodedNominalAndContainmentImplySafety) {
  fixture::UnicycleProblem up;
  int contained = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto tr =
        run_receding_horizon(up.plant, up.safe_set, up.schedule, up.config, up.x0, up.noise, up.horizon, seed);
    bool nominal_ok = true;
    bool inside = true;
    for (int t = 0; t <= up.horizon; ++t) {
      nominal_ok = nominal_ok && is_member_eroded(up.safe_set, tr.nominal_states[t], up.schedule.at(t));
      // Obstacles only see positions, so the position deviation is what matters.
      const double pos_dev = (tr.stochastic_states[t] - tr.nominal_states[t]).head<2>().norm();
      inside = inside && pos_dev <= up.schedule.at(t);
    }
    EXPECT_TRUE(nominal_ok);
    if (nominal_ok && inside) {
      ++contained;
      EXPECT_TRUE(trajectory_safe(tr));
    }
  }
  EXPECT_GT(contained, 0);
}

TEST(ClosedLoop, InfeasibleRunCarriesPartialTrace) {
  fixture::UnicycleProblem up;
  auto cfg = up.config;
  cfg.terminal_set.radius = 1e-4;  // unreachable in 20 steps from x0
  cfg.solver.max_iterations = 20;
  cfg.solver.restoration = false;
  try {
    (void)run_receding_horizon(up.plant, up.safe_set, up.schedule, cfg, up.x0, up.noise, up.horizon, 1);
    FAIL() << "expected InfeasibleAtStep";
  } catch (const InfeasibleAtStep& e) {
    ASSERT_TRUE(e.partial_trace());
    EXPECT_EQ(e.partial_trace()->failed_at, e.time());
  }
}
