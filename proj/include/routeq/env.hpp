#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "routeq/instance.hpp"

namespace routeq {

inline constexpr int kNoNode = -1;

// Dynamic decoding state. Small value type; all transitions are pure
// (state in, state out).
//
// route_open distinguishes "vehicle just left a depot / is mid-route" from
// "vehicle parked at a depot with its route closed". The two are otherwise
// indistinguishable in the multi-depot case once capacity has been reset,
// and they admit different actions.
struct RoutingState {
  std::vector<std::uint8_t> visited;  // per customer
  int visited_count = 0;
  int remaining_capacity = 0;
  int position = kNoNode;      // node index; kNoNode only before the first MDVRP action
  int active_depot = kNoNode;  // depot node index; kNoNode only before the first MDVRP action
  bool route_open = false;
  int step = 0;
  bool done = false;
};

// Bit-packed state stored in replay transitions; features and masks are
// recomputed from it at sampling time.
struct CompactState {
  std::vector<std::uint64_t> visited_bits;
  std::int32_t remaining_capacity = 0;
  std::int32_t position = kNoNode;
  std::int32_t active_depot = kNoNode;
  std::uint8_t route_open = 0;
  std::int32_t step = 0;
};

CompactState compact(const RoutingState& state);
RoutingState expand(const CompactState& compact_state, const Instance& instance);

using Mask = std::vector<std::uint8_t>;  // per node, 1 = feasible

struct StepResult {
  RoutingState state;
  double reward = 0.0;
  bool done = false;
};

// Feature column layout produced by dynamic_features:
// x, y, demand (0 once served), visited, over-capacity, current-position,
// and for MDVRP an extra active-depot column.
namespace feat {
inline constexpr int kX = 0;
inline constexpr int kY = 1;
inline constexpr int kDemand = 2;
inline constexpr int kVisited = 3;    // mu
inline constexpr int kOverCap = 4;    // rho
inline constexpr int kCurrent = 5;    // tau
inline constexpr int kActiveDepot = 6;  // phi (MDVRP only)
}  // namespace feat

RoutingState reset(const Instance& instance);

// Throws std::logic_error when called on a terminal state. Guarantees at
// least one feasible node for every reachable non-terminal state.
Mask feasible_actions(const RoutingState& state, const Instance& instance);

// Throws std::logic_error when the action is infeasible. Reward is the
// negative traversed distance; opening a route at a depot traverses no edge
// and has reward 0, so the episode return is exactly -(total tour length).
StepResult step(const RoutingState& state, int action, const Instance& instance);

// n_nodes x 6 matrix for CVRP, n_nodes x 7 for MDVRP. Pure function of
// (state, instance). Demands are reported raw; scaling is a model concern.
Eigen::MatrixXd dynamic_features(const RoutingState& state, const Instance& instance);

// Routes are node-index sequences including the depot at both ends,
// e.g. {6, 0, 2, 6}.
using Routes = std::vector<std::vector<int>>;

double tour_cost(const Instance& instance, const Routes& routes);

struct Violation {
  enum class Kind {
    kMalformedRoute,
    kDuplicateCustomer,
    kMissingCustomer,
    kCapacityExceeded,
    kDepotMismatch,
  };
  Kind kind;
  std::string detail;
};

// std::nullopt means the solution is valid.
std::optional<Violation> validate_solution(const Instance& instance, const Routes& routes);

// Decode the action sequence of a full episode into explicit routes.
Routes routes_from_actions(const Instance& instance, const std::vector<int>& actions);

}  // namespace routeq
