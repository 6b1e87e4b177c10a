#include <sempc/monte_carlo.hpp>
#include <sempc/noise.hpp>
#include <sempc/sim.hpp>

#include <gtest/gtest.h>

using namespace sempc;

namespace {

Plant scalar_plant(double a) {
  Matrix A(1, 1), B(1, 1);
  A << a;
  B << 1.0;
  return make_linear_plant(A, B, Box::symmetric(1, 1.0));
}

Feedback zero_feedback(int p) {
  return [p](int, const Vector&, const Vector&) { return Vector(Vector::Zero(p)); };
}

}  // namespace

TEST(Noise, ZeroModel) {
  Rng rng(1);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_noise(NoiseModel::zero(), 3, rng), Vector::Zero(3));
  EXPECT_EQ(NoiseModel::zero().variance_proxy(), 0.0);
}

TEST(Noise, GaussianMeanLawOfLargeNumbers) {
  Rng rng(42);
  const double sigma = 0.7;
  const int N = 1000000;
  Vector sum = Vector::Zero(2);
  for (int i = 0; i < N; ++i) sum += sample_noise(NoiseModel::gaussian(sigma), 2, rng);
  const Vector mean = sum / N;
  for (int d = 0; d < 2; ++d) EXPECT_LT(std::abs(mean[d]), 4 * sigma / std::sqrt(double(N)));
}

TEST(Noise, GaussianVarianceMatchesSigma) {
  Rng rng(43);
  RunningStats s;
  for (int i = 0; i < 200000; ++i) s.add(sample_noise(NoiseModel::gaussian(0.3), 1, rng)[0]);
  EXPECT_NEAR(s.variance(), 0.09, 0.09 * 0.02);
}

TEST(Noise, BoundedSupports) {
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    EXPECT_LE(sample_noise(NoiseModel::uniform_ball(0.5), 3, rng).norm(), 0.5 + 1e-12);
    EXPECT_NEAR(sample_noise(NoiseModel::bounded_sphere(0.5), 3, rng).norm(), 0.5, 1e-12);
  }
  EXPECT_EQ(NoiseModel::uniform_ball(0.5).variance_proxy(), 0.5);
}

TEST(Noise, DeterministicGivenState) {
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_noise(NoiseModel::gaussian(1.0), 4, a), sample_noise(NoiseModel::gaussian(1.0), 4, b));
}

TEST(Noise, SeedDerivation) {
  EXPECT_EQ(derive_seed(5, 3), derive_seed(5, 3));
  EXPECT_NE(derive_seed(5, 3), derive_seed(5, 4));
  EXPECT_NE(derive_seed(5, 3), derive_seed(6, 3));
  EXPECT_THROW(NoiseModel::gaussian(-1.0), InvalidParameter);
}

TEST(Rollout, ZeroNoiseTrajectoriesCoincide) {
  const auto p = make_unicycle({});
  Vector x0(3);
  x0 << 2.2, 3.6, 1.0;
  const auto tr = rollout_pair(p, zero_feedback(2), NoiseModel::zero(), x0, 40, 1);
  for (int t = 0; t <= 40; ++t) {
    EXPECT_EQ(tr.stochastic_states[t], tr.nominal_states[t]);
    EXPECT_EQ(tr.deviations[t], 0.0);
  }
}

TEST(Rollout, PairingStructure) {
  const auto p = scalar_plant(0.9);
  Vector x0(1);
  x0 << 0.5;
  const Feedback fb = [](int, const Vector& X, const Vector&) { return Vector(-0.5 * X); };
  const auto tr = rollout_pair(p, fb, NoiseModel::gaussian(0.1), x0, 25, 77);
  ASSERT_EQ(tr.stochastic_states.size(), 26u);
  ASSERT_EQ(tr.inputs.size(), 25u);
  EXPECT_EQ(tr.stochastic_states[0], tr.nominal_states[0]);
  EXPECT_EQ(tr.deviations[0], 0.0);
  for (int t = 0; t < 25; ++t) {
    // The same input drives both systems.
    EXPECT_EQ(tr.nominal_states[t + 1], p.evaluate(tr.nominal_states[t], tr.inputs[t]));
    EXPECT_EQ(tr.stochastic_states[t + 1], p.evaluate(tr.stochastic_states[t], tr.inputs[t]) + tr.noises[t]);
  }
}

TEST(Rollout, LinearDeviationIsAutonomous) {
  Matrix A(2, 2), B(2, 1);
  A << 0.9, 0.3, -0.2, 0.8;
  B << 0.0, 1.0;
  const auto p = make_linear_plant(A, B, Box::symmetric(1, 1.0));
  Vector x0(2);
  x0 << 1.0, -1.0;
  const Feedback sat = [](int, const Vector& X, const Vector&) {
    Vector u(1);
    u << std::clamp(-3.0 * X[0], -1.0, 1.0);
    return u;
  };
  for (const auto& fb : {zero_feedback(1), sat}) {
    const auto tr = rollout_pair(p, fb, NoiseModel::gaussian(0.1), x0, 30, 5);
    Vector e = Vector::Zero(2);
    for (int t = 0; t < 30; ++t) {
      e = A * e + tr.noises[t];
      EXPECT_LT((tr.deviation_vectors[t + 1] - e).norm(), 1e-12);
    }
  }
}

TEST(Rollout, FeedbackErrorKeepsPartialTrace) {
  const auto p = scalar_plant(0.5);
  Vector x0(1);
  x0 << 1.0;
  const Feedback bad = [](int t, const Vector&, const Vector&) -> Vector {
    if (t == 3) throw std::runtime_error("stop");
    return Vector::Zero(1);
  };
  ClosedLoopTrace partial;
  EXPECT_THROW(rollout_pair(p, bad, NoiseModel::gaussian(0.1), x0, 10, 1, &partial), std::runtime_error);
  EXPECT_EQ(partial.failed_at, 3);
  EXPECT_EQ(partial.stochastic_states.size(), 4u);
}

TEST(Contraction, TanhPlantSatisfiesCertifiedBound) {
  Matrix A(2, 2), B(2, 1);
  A << 0.5, 0.2, -0.1, 0.4;
  B << 0.0, 1.0;
  const auto p = make_tanh_plant(A, 0.3, B, Box::symmetric(1, 1.0));
  Vector x0(2);
  x0 << 1.0, 1.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto tr = rollout_pair(p, zero_feedback(1), NoiseModel::gaussian(0.3), x0, 30, s);
    EXPECT_TRUE(satisfies_contraction(p, tr, p.lipschitz()));
    EXPECT_LE(worst_contraction_ratio(p, tr), p.lipschitz());
  }
}

TEST(Contraction, DetectsViolation) {
  const auto p = scalar_plant(0.9);
  Vector x0(1);
  x0 << 1.0;
  const auto tr = rollout_pair(p, zero_feedback(1), NoiseModel::gaussian(0.3), x0, 30, 2);
  EXPECT_TRUE(satisfies_contraction(p, tr, 0.9));
  EXPECT_FALSE(satisfies_contraction(p, tr, 0.5));
}

TEST(Stats, WilsonInterval) {
  const auto i = wilson_interval(50, 100);
  EXPECT_NEAR(i.lower, 0.4038, 1e-4);
  EXPECT_NEAR(i.upper, 0.5962, 1e-4);
  const auto all = wilson_interval(1000, 1000);
  EXPECT_EQ(all.upper, 1.0);
  EXPECT_NEAR(all.lower, 0.99617, 1e-5);
}

TEST(Stats, RunningStatsMergeMatchesSequential) {
  RunningStats a, b, all;
  for (int i = 0; i < 100; ++i) {
    const double x = std::sin(i * 0.37) * 5 + i * 0.01;
    (i < 37 ? a : b).add(x);
    all.add(x);
  }
  a.merge(b);
  EXPECT_EQ(a.count, all.count);
  EXPECT_NEAR(a.mean, all.mean, 1e-12);
  EXPECT_NEAR(a.variance(), all.variance(), 1e-10);
}

TEST(MonteCarlo, ResultIndependentOfParallelism) {
  const auto p = scalar_plant(0.8);
  Vector x0(1);
  x0 << 0.0;
  TubeParams tp;
  tp.sigma = 0.1;
  tp.lipschitz = 0.8;
  tp.delta = 0.05;
  tp.horizon = 15;
  const auto sched = tube_schedule(tp);
  RunFunction run = [&](std::size_t i, std::uint64_t seed) {
    RunRecord r;
    r.index = i;
    r.seed = seed;
    r.trace = rollout_pair(p, zero_feedback(1), NoiseModel::gaussian(0.1), x0, 15, seed);
    annotate_safety(r.trace, SafeSet{});
    return r;
  };
  const auto a = monte_carlo_runs(run, 500, sched.radii, 3, 1);
  const auto b = monte_carlo_runs(run, 500, sched.radii, 3, 4);
  EXPECT_EQ(a.contained_runs, b.contained_runs);
  EXPECT_EQ(a.safe_runs, 500u);
  for (std::size_t t = 0; t < a.sq_deviation.size(); ++t) {
    EXPECT_EQ(a.sq_deviation[t].mean, b.sq_deviation[t].mean);
    EXPECT_EQ(a.sq_deviation[t].m2, b.sq_deviation[t].m2);
  }
}

TEST(MonteCarlo, ErrorsPropagate) {
  RunFunction run = [](std::size_t i, std::uint64_t) -> RunRecord {
    if (i == 7) throw std::runtime_error("boom");
    return {};
  };
  EXPECT_THROW(monte_carlo_runs(run, 20, {0.0}, 1, 2), std::runtime_error);
  EXPECT_THROW(monte_carlo_runs(run, 0, {0.0}, 1, 1), InvalidParameter);
}
