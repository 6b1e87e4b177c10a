#pragma once

// Unicycle problem used across the MPC tests; same values as
// scenarios/unicycle.yaml.

#include <sempc/costs.hpp>
#include <sempc/mpc.hpp>
#include <sempc/systems.hpp>
#include <sempc/tube.hpp>

#include <cmath>
#include <numbers>

namespace fixture {

using namespace sempc;

struct UnicycleProblem {
  Plant plant = make_unicycle({});
  SafeSet safe_set{{make_disk(2.0, 1.7, 0.4), make_disk(-0.64, 3.32, 0.4)}, std::nullopt};
  TubeSchedule schedule;
  MpcConfig config;
  Vector x0 = Vector(3);
  NoiseModel noise = NoiseModel::gaussian(std::sqrt(0.002));
  int horizon = 30;

  UnicycleProblem() {
    TubeParams tp;
    tp.sigma = std::sqrt(0.002);
    tp.lipschitz = plant.lipschitz();
    tp.state_dim = 3;
    tp.delta = 1e-3;
    tp.horizon = horizon;
    schedule = tube_schedule(tp);
    config.window = 20;
    config.terminal_set.center = Vector::Zero(2);
    config.terminal_set.dims = {0, 1};
    config.terminal_set.radius = 0.5;
    config.terminal_controller = zero_input_controller(2);
    config.costs = l1_cost(1.0, 0.1, 3);
    x0 << 2.2, 3.6, std::numbers::pi / 3;
  }
};

}  // namespace fixture
