#include "routeq/search.hpp"

#include <chrono>
#include <stdexcept>

#include "json.hpp"
#include "routeq/learner.hpp"
#include "routeq/rng.hpp"

namespace routeq {

namespace {

constexpr std::uint64_t kTagRollout = 0x726f6c6c6f757471ULL;
constexpr int kRolloutChunk = 256;

struct RolloutSpec {
  bool greedy = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct RolloutSlot {
  RoutingState state;
  std::vector<int> actions;
  Rng rng;
  bool greedy;
  double temperature;

  RolloutSlot(RoutingState s, const RolloutSpec& spec)
      : state(std::move(s)), rng(spec.seed), greedy(spec.greedy),
        temperature(spec.temperature) {}
};

// Advances all rollouts in lockstep; finished ones drop out of the batch.
std::vector<std::pair<Routes, double>> rollout_chunk(QNet& net, const Instance& instance,
                                                     const std::vector<RolloutSpec>& specs) {
  std::vector<RolloutSlot> slots;
  slots.reserve(specs.size());
  for (const RolloutSpec& spec : specs) slots.emplace_back(reset(instance), spec);

  std::vector<int> active(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) active[i] = static_cast<int>(i);

  while (!active.empty()) {
    std::vector<StateRef> refs;
    refs.reserve(active.size());
    for (int id : active) refs.push_back({&instance, &slots[id].state});
    const Eigen::MatrixXd q = forward_batch(net, refs);

    std::vector<int> still;
    still.reserve(active.size());
    for (std::size_t k = 0; k < active.size(); ++k) {
      RolloutSlot& slot = slots[active[k]];
      const Mask mask = feasible_actions(slot.state, instance);
      const Eigen::VectorXd q_row = q.row(static_cast<Eigen::Index>(k));
      const int action =
          slot.greedy ? argmax_feasible(q_row, mask)
                      : select_action_boltzmann(q_row, mask, slot.temperature, slot.rng);
      StepResult sr = step(slot.state, action, instance);
      slot.actions.push_back(action);
      slot.state = std::move(sr.state);
      if (!sr.done) still.push_back(active[k]);
    }
    active = std::move(still);
  }

  std::vector<std::pair<Routes, double>> out;
  out.reserve(slots.size());
  for (RolloutSlot& slot : slots) {
    Routes routes = routes_from_actions(instance, slot.actions);
    const double cost = tour_cost(instance, routes);
    out.emplace_back(std::move(routes), cost);
  }
  return out;
}

void check_valid(const Instance& instance, const Routes& routes, const char* who) {
  if (auto violation = validate_solution(instance, routes))
    throw std::logic_error(std::string(who) + ": produced an invalid solution: " +
                           violation->detail);
}

}  // namespace

Solution solve_greedy(QNet& net, const Instance& instance) {
  const auto t0 = std::chrono::steady_clock::now();
  auto rollouts = rollout_chunk(net, instance, {RolloutSpec{true, 0.0, 0}});
  Solution sol;
  sol.routes = std::move(rollouts.front().first);
  sol.cost = rollouts.front().second;
  sol.decode_mode = "greedy";
  sol.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  check_valid(instance, sol.routes, "solve_greedy");
  return sol;
}

Solution solve_sampling(QNet& net, const Instance& instance, int samples,
                        double temperature, std::uint64_t seed) {
  if (samples < 1) throw std::invalid_argument("solve_sampling: samples must be >= 1");
  if (temperature <= 0.0)
    throw std::invalid_argument("solve_sampling: temperature must be > 0");
  const auto t0 = std::chrono::steady_clock::now();

  // Pool order is [greedy, rollout 1, ..., rollout S]; min-cost with
  // first-index tie-break keeps results independent of chunking.
  Routes best_routes;
  double best_cost = std::numeric_limits<double>::infinity();
  int next_rollout = 0;  // 0 is the greedy slot
  while (next_rollout <= samples) {
    std::vector<RolloutSpec> specs;
    while (next_rollout <= samples && static_cast<int>(specs.size()) < kRolloutChunk) {
      if (next_rollout == 0) {
        specs.push_back(RolloutSpec{true, 0.0, 0});
      } else {
        specs.push_back(RolloutSpec{
            false, temperature,
            mix_seed(mix_seed(seed, kTagRollout), static_cast<std::uint64_t>(next_rollout))});
      }
      ++next_rollout;
    }
    for (auto& [routes, cost] : rollout_chunk(net, instance, specs)) {
      if (cost < best_cost) {
        best_cost = cost;
        best_routes = std::move(routes);
      }
    }
  }

  Solution sol;
  sol.routes = std::move(best_routes);
  sol.cost = best_cost;
  sol.decode_mode = "sampled";
  sol.samples = samples;
  sol.temperature = temperature;
  sol.seed = seed;
  sol.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  check_valid(instance, sol.routes, "solve_sampling");
  return sol;
}

std::string solution_to_json(const Solution& solution, const std::string& instance_id) {
  nlohmann::json decode{{"mode", solution.decode_mode}};
  if (solution.decode_mode == "sampled") {
    decode["samples"] = solution.samples;
    decode["temperature"] = solution.temperature;
    decode["seed"] = solution.seed;
  }
  nlohmann::json obj{{"instance_id", instance_id},
                     {"routes", solution.routes},
                     {"cost", solution.cost},
                     {"decode", decode},
                     {"wall_clock_s", solution.wall_clock_s}};
  return obj.dump();
}

}  // namespace routeq
