#include "routeq/env.hpp"

#include <bit>
#include <sstream>
#include <stdexcept>

namespace routeq {

CompactState compact(const RoutingState& state) {
  CompactState out;
  out.visited_bits.assign((state.visited.size() + 63) / 64, 0);
  for (std::size_t i = 0; i < state.visited.size(); ++i)
    if (state.visited[i]) out.visited_bits[i >> 6] |= std::uint64_t(1) << (i & 63);
  out.remaining_capacity = state.remaining_capacity;
  out.position = state.position;
  out.active_depot = state.active_depot;
  out.route_open = state.route_open ? 1 : 0;
  out.step = state.step;
  return out;
}

RoutingState expand(const CompactState& c, const Instance& instance) {
  RoutingState s;
  s.visited.assign(instance.n(), 0);
  for (int i = 0; i < instance.n(); ++i)
    if (c.visited_bits[i >> 6] & (std::uint64_t(1) << (i & 63))) {
      s.visited[i] = 1;
      ++s.visited_count;
    }
  s.remaining_capacity = c.remaining_capacity;
  s.position = c.position;
  s.active_depot = c.active_depot;
  s.route_open = c.route_open != 0;
  s.step = c.step;
  s.done = false;  // terminal states are never stored for expansion
  return s;
}

RoutingState reset(const Instance& instance) {
  RoutingState s;
  s.visited.assign(instance.n(), 0);
  s.remaining_capacity = instance.capacity;
  if (instance.is_mdvrp()) {
    s.position = kNoNode;
    s.active_depot = kNoNode;
  } else {
    s.position = instance.n();  // the single depot
    s.active_depot = instance.n();
  }
  s.route_open = false;
  return s;
}

namespace {

bool action_feasible(const RoutingState& s, int action, const Instance& inst) {
  const int n = inst.n();
  if (action < 0 || action >= inst.n_nodes()) return false;
  if (!inst.is_depot(action)) {
    if (s.visited[action] || inst.demands(action) > s.remaining_capacity) return false;
    // Customers are reachable only from an open route (or, for CVRP, from
    // the depot, which implicitly opens one).
    if (inst.is_mdvrp() && !s.route_open) return false;
    return true;
  }
  if (!inst.is_mdvrp()) return s.position != n;  // return to the depot
  if (!s.route_open) return true;  // any depot may open the next route
  // A route in progress can only be closed at its own depot, and not before
  // the first customer has been inserted.
  return action == s.active_depot && s.position != s.active_depot;
}

}  // namespace

Mask feasible_actions(const RoutingState& state, const Instance& instance) {
  if (state.done)
    throw std::logic_error("feasible_actions: called on a terminal state");
  Mask mask(instance.n_nodes(), 0);
  for (int a = 0; a < instance.n_nodes(); ++a)
    mask[a] = action_feasible(state, a, instance) ? 1 : 0;
  return mask;
}

StepResult step(const RoutingState& state, int action, const Instance& instance) {
  if (state.done) throw std::logic_error("step: called on a terminal state");
  if (!action_feasible(state, action, instance)) {
    std::ostringstream msg;
    msg << "step: infeasible action " << action << " at step " << state.step;
    throw std::logic_error(msg.str());
  }

  StepResult result;
  RoutingState& s = result.state;
  s = state;

  if (instance.is_depot(action)) {
    if (instance.is_mdvrp() && !state.route_open) {
      // Opening a route: the vehicle materializes at the chosen depot.
      result.reward = 0.0;
      s.active_depot = action;
      s.route_open = true;
    } else {
      result.reward = -instance.distance(state.position, action);
      s.route_open = false;
      if (s.visited_count == instance.n()) s.done = true;
    }
    s.remaining_capacity = instance.capacity;
  } else {
    result.reward = -instance.distance(state.position, action);
    s.visited[action] = 1;
    ++s.visited_count;
    s.remaining_capacity -= instance.demands(action);
    s.route_open = true;
  }
  s.position = action;
  ++s.step;
  result.done = s.done;
  return result;
}

Eigen::MatrixXd dynamic_features(const RoutingState& state, const Instance& instance) {
  const int n = instance.n();
  const int cols = instance.is_mdvrp() ? 7 : 6;
  Eigen::MatrixXd f = Eigen::MatrixXd::Zero(instance.n_nodes(), cols);
  for (int i = 0; i < n; ++i) {
    f(i, feat::kX) = instance.customers(i, 0);
    f(i, feat::kY) = instance.customers(i, 1);
    if (!state.visited[i]) {
      f(i, feat::kDemand) = instance.demands(i);
      if (instance.demands(i) > state.remaining_capacity) f(i, feat::kOverCap) = 1.0;
    } else {
      f(i, feat::kVisited) = 1.0;
    }
  }
  for (int j = 0; j < instance.m(); ++j) {
    f(n + j, feat::kX) = instance.depots(j, 0);
    f(n + j, feat::kY) = instance.depots(j, 1);
  }
  if (state.position != kNoNode) f(state.position, feat::kCurrent) = 1.0;
  if (instance.is_mdvrp() && state.active_depot != kNoNode)
    f(state.active_depot, feat::kActiveDepot) = 1.0;
  return f;
}

double tour_cost(const Instance& instance, const Routes& routes) {
  double cost = 0.0;
  for (const std::vector<int>& route : routes)
    for (std::size_t k = 1; k < route.size(); ++k)
      cost += instance.distance(route[k - 1], route[k]);
  return cost;
}

std::optional<Violation> validate_solution(const Instance& instance, const Routes& routes) {
  const int n = instance.n();
  std::vector<int> visit_count(n, 0);
  for (std::size_t r = 0; r < routes.size(); ++r) {
    const std::vector<int>& route = routes[r];
    const std::string tag = "route " + std::to_string(r);
    if (route.size() < 3)
      return Violation{Violation::Kind::kMalformedRoute, tag + " has fewer than 3 nodes"};
    for (int node : route)
      if (node < 0 || node >= instance.n_nodes())
        return Violation{Violation::Kind::kMalformedRoute, tag + " references an unknown node"};
    if (!instance.is_depot(route.front()) || !instance.is_depot(route.back()))
      return Violation{Violation::Kind::kDepotMismatch, tag + " does not start and end at a depot"};
    if (route.front() != route.back())
      return Violation{Violation::Kind::kDepotMismatch,
                       tag + " ends at a different depot than it started"};
    long load = 0;
    for (std::size_t k = 1; k + 1 < route.size(); ++k) {
      const int node = route[k];
      if (instance.is_depot(node))
        return Violation{Violation::Kind::kMalformedRoute, tag + " has a depot in its interior"};
      if (++visit_count[node] > 1)
        return Violation{Violation::Kind::kDuplicateCustomer,
                         "customer " + std::to_string(node) + " visited more than once"};
      load += instance.demands(node);
    }
    if (load > instance.capacity)
      return Violation{Violation::Kind::kCapacityExceeded,
                       tag + " load " + std::to_string(load) + " exceeds capacity " +
                           std::to_string(instance.capacity)};
  }
  for (int i = 0; i < n; ++i)
    if (visit_count[i] == 0)
      return Violation{Violation::Kind::kMissingCustomer,
                       "customer " + std::to_string(i) + " is not visited"};
  return std::nullopt;
}

Routes routes_from_actions(const Instance& instance, const std::vector<int>& actions) {
  Routes routes;
  std::vector<int> current;
  int current_depot = instance.is_mdvrp() ? kNoNode : instance.n();
  for (int action : actions) {
    if (instance.is_depot(action)) {
      if (current.empty()) {
        current_depot = action;  // opening a route
      } else {
        current.push_back(action);
        routes.push_back(std::move(current));
        current.clear();
      }
    } else {
      if (current.empty()) {
        if (current_depot == kNoNode)
          throw std::logic_error("routes_from_actions: customer before any depot");
        current.push_back(current_depot);
      }
      current.push_back(action);
    }
  }
  if (!current.empty())
    throw std::logic_error("routes_from_actions: action sequence does not close its last route");
  return routes;
}

}  // namespace routeq
