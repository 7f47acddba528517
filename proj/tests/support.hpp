#pragma once

#include <random>

#include "cmpc/sim.hpp"

namespace test {

inline cmpc::VehicleParams hatchback(double mu = 0.25) {
  return cmpc::make_vehicle_params(1500.0, 2250.0, 1.04, 1.42, 9.81, 80000.0, 80000.0, mu, mu);
}

inline double rel_err(double got, double want) {
  return std::abs(got - want) / std::max(1.0, std::abs(want));
}

inline std::mt19937_64 rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}

}  // namespace test
