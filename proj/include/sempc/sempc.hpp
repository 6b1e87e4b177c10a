#pragma once

// Everything except the optional-dependency headers (scenario, exact,
// experiments), which need yaml-cpp, GMP and nlohmann_json.

#include <sempc/core.hpp>
#include <sempc/costs.hpp>
#include <sempc/geometry.hpp>
#include <sempc/monte_carlo.hpp>
#include <sempc/mpc.hpp>
#include <sempc/noise.hpp>
#include <sempc/sim.hpp>
#include <sempc/systems.hpp>
#include <sempc/tube.hpp>
