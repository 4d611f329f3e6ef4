#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "routeq/env.hpp"
#include "routeq/instance.hpp"
#include "routeq/qnet.hpp"

namespace routeq {

struct Solution {
  Routes routes;
  double cost = 0.0;
  std::string decode_mode;  // "greedy" | "sampled"
  int samples = 0;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  double wall_clock_s = 0.0;
};

// Feasible argmax decoding, ties broken by lowest node index. Deterministic.
Solution solve_greedy(QNet& net, const Instance& instance);

// S Boltzmann rollouts at the given temperature plus one greedy rollout;
// returns the cheapest. Rollout j draws from a generator seeded by (seed, j),
// so enlarging S keeps earlier rollouts identical and the result can only
// improve. Deterministic given seed.
Solution solve_sampling(QNet& net, const Instance& instance, int samples,
                        double temperature, std::uint64_t seed);

// {"instance_id":..,"routes":..,"cost":..} plus decode metadata.
std::string solution_to_json(const Solution& solution, const std::string& instance_id);

}  // namespace routeq
