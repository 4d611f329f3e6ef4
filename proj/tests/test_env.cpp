#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "routeq/env.hpp"
#include "routeq/instance.hpp"
#include "routeq/rng.hpp"

using namespace routeq;

namespace {

Instance square_instance(std::vector<double> xs, std::vector<double> ys,
                         std::vector<int> demands, std::vector<double> depot_xy,
                         int capacity) {
  Instance inst;
  const int n = static_cast<int>(demands.size());
  inst.customers.resize(n, 2);
  inst.demands.resize(n);
  for (int i = 0; i < n; ++i) {
    inst.customers(i, 0) = xs[i];
    inst.customers(i, 1) = ys[i];
    inst.demands(i) = demands[i];
  }
  inst.depots.resize(static_cast<int>(depot_xy.size()) / 2, 2);
  for (int j = 0; j < inst.m(); ++j) {
    inst.depots(j, 0) = depot_xy[2 * j];
    inst.depots(j, 1) = depot_xy[2 * j + 1];
  }
  inst.capacity = capacity;
  inst.id = "hand";
  return inst;
}

struct EpisodeTrace {
  std::vector<int> actions;
  double total_reward = 0.0;
  int steps = 0;
  int routes = 0;
};

EpisodeTrace random_episode(const Instance& inst, Rng& rng) {
  EpisodeTrace trace;
  RoutingState state = reset(inst);
  while (!state.done) {
    const Mask mask = feasible_actions(state, inst);
    int feasible = 0;
    for (auto f : mask) feasible += f ? 1 : 0;
    REQUIRE(feasible > 0);  // no deadlock
    int pick = static_cast<int>(rng.uniform_int(0, feasible - 1));
    int action = -1;
    for (int a = 0; a < static_cast<int>(mask.size()); ++a)
      if (mask[a] && pick-- == 0) {
        action = a;
        break;
      }
    const StepResult sr = step(state, action, inst);
    trace.actions.push_back(action);
    trace.total_reward += sr.reward;
    trace.steps += 1;
    state = sr.state;
  }
  for (std::size_t k = 0; k < trace.actions.size(); ++k)
    if (inst.is_depot(trace.actions[k]) &&
        (k + 1 == trace.actions.size() || !inst.is_depot(trace.actions[k + 1])))
      ;  // route bookkeeping is done via routes_from_actions below
  return trace;
}

}  // namespace

TEST_CASE("reset CVRP") {
  const Instance inst = generate_instance(3, 1, 30, 5);
  const RoutingState s = reset(inst);
  CHECK(s.visited == std::vector<std::uint8_t>{0, 0, 0});
  CHECK(s.remaining_capacity == 30);
  CHECK(s.position == 3);  // the depot
  CHECK(s.active_depot == 3);
  CHECK_FALSE(s.done);
  const RoutingState s2 = reset(inst);
  CHECK(s2.position == s.position);
  CHECK(s2.visited == s.visited);
}

TEST_CASE("reset MDVRP exposes exactly the depots") {
  const Instance inst = generate_instance(4, 2, 30, 5);
  const RoutingState s = reset(inst);
  CHECK(s.position == kNoNode);
  CHECK(s.active_depot == kNoNode);
  const Mask mask = feasible_actions(s, inst);
  CHECK(mask == Mask{0, 0, 0, 0, 1, 1});
}

TEST_CASE("mask follows the capacity rule") {
  const Instance inst =
      square_instance({0.1, 0.2, 0.3}, {0.1, 0.2, 0.3}, {5, 2, 9}, {0.5, 0.5}, 10);
  RoutingState s = reset(inst);
  s.position = 0;  // parked at a customer, c = 3 left
  s.remaining_capacity = 3;
  const Mask mask = feasible_actions(s, inst);
  CHECK(mask == Mask{0, 1, 0, 1});  // only the d=2 customer, plus the depot
}

TEST_CASE("forced return when everything is visited") {
  const Instance inst = square_instance({0.1, 0.9}, {0.1, 0.9}, {3, 3}, {0.5, 0.5}, 30);
  RoutingState s = reset(inst);
  s = step(s, 0, inst).state;
  s = step(s, 1, inst).state;
  const Mask mask = feasible_actions(s, inst);
  CHECK(mask == Mask{0, 0, 1});
  const StepResult done = step(s, 2, inst);
  CHECK(done.done);
  CHECK(done.state.done);
}

TEST_CASE("step rewards are negative edge distances") {
  const Instance inst = square_instance({0.5}, {1.0}, {3}, {0.5, 0.5}, 30);
  const RoutingState s = reset(inst);
  const StepResult sr = step(s, 0, inst);
  CHECK(sr.reward == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("step rejects infeasible actions and terminal states") {
  const Instance inst = generate_instance(3, 1, 30, 11);
  RoutingState s = reset(inst);
  CHECK_THROWS_AS(step(s, 3, inst), std::logic_error);  // depot from depot
  s = step(s, 0, inst).state;
  CHECK_THROWS_AS(step(s, 0, inst), std::logic_error);  // already visited
  s = step(s, 1, inst).state;
  s = step(s, 2, inst).state;
  const StepResult done = step(s, 3, inst);
  CHECK(done.done);
  CHECK_THROWS_AS(feasible_actions(done.state, inst), std::logic_error);
  CHECK_THROWS_AS(step(done.state, 3, inst), std::logic_error);
}

TEST_CASE("episode return equals negative tour cost") {
  const Instance inst = generate_instance(4, 1, 30, 77);
  Rng rng(42);
  const EpisodeTrace trace = random_episode(inst, rng);
  const Routes routes = routes_from_actions(inst, trace.actions);
  CHECK(trace.total_reward == doctest::Approx(-tour_cost(inst, routes)).epsilon(1e-9));
}

TEST_CASE("dynamic features on a fresh CVRP state") {
  const Instance inst =
      square_instance({0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, {5, 2, 9}, {0.5, 0.5}, 8);
  const RoutingState s = reset(inst);
  const Eigen::MatrixXd f = dynamic_features(s, inst);
  REQUIRE(f.rows() == 4);
  REQUIRE(f.cols() == 6);
  for (int i = 0; i < 3; ++i) {
    CHECK(f(i, feat::kX) == inst.customers(i, 0));
    CHECK(f(i, feat::kY) == inst.customers(i, 1));
    CHECK(f(i, feat::kDemand) == inst.demands(i));
    CHECK(f(i, feat::kVisited) == 0.0);
    CHECK(f(i, feat::kCurrent) == 0.0);
  }
  CHECK(f(0, feat::kOverCap) == 0.0);  // 5 <= 8
  CHECK(f(1, feat::kOverCap) == 0.0);  // 2 <= 8
  CHECK(f(2, feat::kOverCap) == 1.0);  // 9 > 8
  CHECK(f(3, feat::kCurrent) == 1.0);  // vehicle starts at the depot
  CHECK(f(3, feat::kDemand) == 0.0);
  CHECK(f(3, feat::kVisited) == 0.0);
}

TEST_CASE("dynamic features after serving a customer") {
  const Instance inst =
      square_instance({0.1, 0.2, 0.3}, {0.4, 0.5, 0.6}, {5, 2, 9}, {0.5, 0.5}, 30);
  RoutingState s = reset(inst);
  s = step(s, 1, inst).state;
  const Eigen::MatrixXd f = dynamic_features(s, inst);
  CHECK(f(1, feat::kVisited) == 1.0);
  CHECK(f(1, feat::kDemand) == 0.0);
  CHECK(f(1, feat::kOverCap) == 0.0);
  CHECK(f(1, feat::kCurrent) == 1.0);
  CHECK(f(0, feat::kCurrent) == 0.0);
  CHECK(f(2, feat::kCurrent) == 0.0);
  CHECK(f(3, feat::kCurrent) == 0.0);
  // pure function of (state, instance)
  CHECK(dynamic_features(s, inst) == f);
}

TEST_CASE("MDVRP features mark the active depot") {
  const Instance inst = generate_instance(4, 3, 30, 9);
  RoutingState s = reset(inst);
  const Eigen::MatrixXd f0 = dynamic_features(s, inst);
  REQUIRE(f0.cols() == 7);
  CHECK(f0.col(feat::kCurrent).sum() == 0.0);      // no position yet
  CHECK(f0.col(feat::kActiveDepot).sum() == 0.0);  // no active depot yet
  s = step(s, 5, inst).state;  // open a route at depot index 1
  const Eigen::MatrixXd f1 = dynamic_features(s, inst);
  CHECK(f1(5, feat::kActiveDepot) == 1.0);
  CHECK(f1.col(feat::kActiveDepot).sum() == 1.0);
  CHECK(f1(5, feat::kCurrent) == 1.0);
}

TEST_CASE("MDVRP cannot close at a foreign depot and cannot close empty routes") {
  const Instance inst = generate_instance(4, 2, 30, 21);
  RoutingState s = reset(inst);
  s = step(s, 4, inst).state;  // open at depot A
  // Just opened: no depot feasible at all.
  Mask mask = feasible_actions(s, inst);
  CHECK(mask[4] == 0);
  CHECK(mask[5] == 0);
  s = step(s, 0, inst).state;  // first customer
  mask = feasible_actions(s, inst);
  CHECK(mask[4] == 1);  // own depot closes the route
  CHECK(mask[5] == 0);  // foreign depot never feasible mid-route
  CHECK_THROWS_AS(step(s, 5, inst), std::logic_error);
}

TEST_CASE("MDVRP reopening after a closed route is depot-only") {
  const Instance inst = generate_instance(3, 2, 30, 33);
  RoutingState s = reset(inst);
  s = step(s, 3, inst).state;
  s = step(s, 0, inst).state;
  s = step(s, 3, inst).state;  // close route at depot A; customers 1,2 remain
  CHECK_FALSE(s.done);
  CHECK_FALSE(s.route_open);
  const Mask mask = feasible_actions(s, inst);
  CHECK(mask == Mask{0, 0, 0, 1, 1});  // both depots may open the next route
}

TEST_CASE("tour_cost on a single out-and-back route") {
  const Instance inst = square_instance({0.0}, {1.0}, {3}, {0.0, 0.0}, 30);
  const Routes routes{{1, 0, 1}};
  CHECK(tour_cost(inst, routes) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("validate_solution catches each violation kind") {
  const Instance inst =
      square_instance({0.1, 0.2, 0.3}, {0.1, 0.2, 0.3}, {5, 6, 7}, {0.5, 0.5, 0.9, 0.9}, 12);
  // valid: two routes from depot 3 and depot 4
  CHECK_FALSE(validate_solution(inst, {{3, 0, 1, 3}, {4, 2, 4}}).has_value());

  auto v = validate_solution(inst, {{3, 0, 1, 3}});
  REQUIRE(v.has_value());
  CHECK(v->kind == Violation::Kind::kMissingCustomer);

  v = validate_solution(inst, {{3, 0, 1, 3}, {4, 2, 0, 4}});
  REQUIRE(v.has_value());
  CHECK(v->kind == Violation::Kind::kDuplicateCustomer);

  v = validate_solution(inst, {{3, 0, 1, 2, 3}});
  REQUIRE(v.has_value());
  CHECK(v->kind == Violation::Kind::kCapacityExceeded);

  v = validate_solution(inst, {{3, 0, 1, 4}, {4, 2, 4}});
  REQUIRE(v.has_value());
  CHECK(v->kind == Violation::Kind::kDepotMismatch);

  v = validate_solution(inst, {{3, 3}, {3, 0, 1, 2, 3}});
  REQUIRE(v.has_value());
  CHECK(v->kind == Violation::Kind::kMalformedRoute);
}

TEST_CASE("compact/expand round-trips reachable states") {
  const Instance inst = generate_instance(9, 2, 30, 123);
  Rng rng(5);
  RoutingState s = reset(inst);
  for (int k = 0; k < 6 && !s.done; ++k) {
    const Mask mask = feasible_actions(s, inst);
    int pick = -1;
    for (int a = 0; a < static_cast<int>(mask.size()); ++a)
      if (mask[a]) {
        pick = a;
        break;
      }
    s = step(s, pick, inst).state;
    const RoutingState back = expand(compact(s), inst);
    CHECK(back.visited == s.visited);
    CHECK(back.visited_count == s.visited_count);
    CHECK(back.remaining_capacity == s.remaining_capacity);
    CHECK(back.position == s.position);
    CHECK(back.active_depot == s.active_depot);
    CHECK(back.route_open == s.route_open);
    CHECK(back.step == s.step);
  }
}

TEST_CASE("random-policy fuzz: termination, validity, return identity") {
  Rng rng(20240817);
  int episodes = 0;
  for (int n = 1; n <= 20; ++n) {
    for (int m : {1, 2, 3}) {
      for (int rep = 0; rep < (n <= 8 ? 30 : 12); ++rep) {
        const Instance inst = generate_instance(
            n, m, default_capacity(n), mix_seed(9000 + episodes, rep));
        EpisodeTrace trace = random_episode(inst, rng);
        const Routes routes = routes_from_actions(inst, trace.actions);
        CHECK_FALSE(validate_solution(inst, routes).has_value());
        CHECK(trace.total_reward ==
              doctest::Approx(-tour_cost(inst, routes)).epsilon(1e-9));
        CHECK(trace.steps <= 2 * n + 2 * static_cast<int>(routes.size()));
        ++episodes;
      }
    }
  }
  CHECK(episodes >= 1000);
}
