#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "routeq/bench.hpp"
#include "routeq/env.hpp"
#include "routeq/instance.hpp"
#include "routeq/rng.hpp"

using namespace routeq;

namespace {

// Independent oracle: enumerate every set partition of the customers into
// routes; each route is solved exactly by permutation and assigned its best
// depot. Exponential, so n <= 6 only.
double partition_enumeration_optimal(const Instance& inst) {
  const int n = inst.n();
  const Eigen::MatrixXd dist = distance_matrix(inst);

  auto route_cost = [&](std::vector<int> block) {
    std::sort(block.begin(), block.end());
    long load = 0;
    for (int c : block) load += inst.demands(c);
    if (load > inst.capacity) return std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    do {
      double path = 0.0;
      for (std::size_t k = 1; k < block.size(); ++k)
        path += dist(block[k - 1], block[k]);
      for (int d = 0; d < inst.m(); ++d) {
        const int depot = n + d;
        best = std::min(best, dist(depot, block.front()) + path + dist(block.back(), depot));
      }
    } while (std::next_permutation(block.begin(), block.end()));
    return best;
  };

  std::vector<int> assignment(n, -1);
  double best_total = std::numeric_limits<double>::infinity();
  // restricted-growth enumeration of partitions
  std::function<void(int, int)> recurse = [&](int i, int used) {
    if (i == n) {
      std::vector<std::vector<int>> blocks(used);
      for (int c = 0; c < n; ++c) blocks[assignment[c]].push_back(c);
      double total = 0.0;
      for (auto& block : blocks) {
        total += route_cost(block);
        if (!(total < best_total)) return;
      }
      best_total = std::min(best_total, total);
      return;
    }
    for (int b = 0; b <= used && b < n; ++b) {
      assignment[i] = b;
      recurse(i + 1, std::max(used, b + 1));
    }
    assignment[i] = -1;
  };
  recurse(0, 0);
  return best_total;
}

}  // namespace

TEST_CASE("nearest neighbor on trivial geometry") {
  SUBCASE("single customer") {
    const Instance inst = generate_instance(1, 1, 30, 1);
    const Solution sol = nearest_neighbor_baseline(inst);
    REQUIRE(sol.routes.size() == 1);
    CHECK(sol.routes[0] == std::vector<int>{1, 0, 1});
  }

  SUBCASE("customers on a line are visited in order") {
    Instance inst;
    inst.customers.resize(4, 2);
    inst.customers << 0.2, 0.0, 0.4, 0.0, 0.6, 0.0, 0.8, 0.0;
    inst.demands.resize(4);
    inst.demands << 1, 1, 1, 1;
    inst.depots.resize(1, 2);
    inst.depots << 0.0, 0.0;
    inst.capacity = 30;
    const Solution sol = nearest_neighbor_baseline(inst);
    REQUIRE(sol.routes.size() == 1);
    CHECK(sol.routes[0] == std::vector<int>{4, 0, 1, 2, 3, 4});
  }
}

TEST_CASE("nearest neighbor always produces valid solutions (fuzz)") {
  Rng rng(2);
  for (int k = 0; k < 10000; ++k) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 11));
    const int m = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const Instance inst = generate_instance(n, m, default_capacity(n), 5000 + k);
    const Solution sol = nearest_neighbor_baseline(inst);
    CHECK_FALSE(validate_solution(inst, sol.routes).has_value());
    CHECK(sol.cost == doctest::Approx(tour_cost(inst, sol.routes)).epsilon(1e-9));
  }
}

TEST_CASE("brute force oracle on hand-checkable cases") {
  SUBCASE("single customer") {
    const Instance inst = generate_instance(1, 1, 30, 3);
    const Solution sol = brute_force_optimal(inst);
    CHECK(sol.cost == doctest::Approx(2.0 * inst.distance(0, 1)).epsilon(1e-12));
  }

  SUBCASE("two customers: min over the three route structures") {
    const Instance inst = generate_instance(2, 1, 30, 4);
    const Eigen::MatrixXd d = distance_matrix(inst);
    const double joint01 = d(2, 0) + d(0, 1) + d(1, 2);
    const double joint10 = d(2, 1) + d(1, 0) + d(0, 2);
    const double split = 2.0 * d(2, 0) + 2.0 * d(2, 1);
    const double want = std::min({joint01, joint10, split});
    CHECK(brute_force_optimal(inst).cost == doctest::Approx(want).epsilon(1e-12));
  }

  SUBCASE("capacity forces a split") {
    Instance inst;
    inst.customers.resize(2, 2);
    inst.customers << 0.0, 1.0, 1.0, 1.0;
    inst.demands.resize(2);
    inst.demands << 9, 9;
    inst.depots.resize(1, 2);
    inst.depots << 0.5, 0.0;
    inst.capacity = 10;  // both customers cannot share a route
    const Solution sol = brute_force_optimal(inst);
    CHECK(sol.routes.size() == 2);
    CHECK_FALSE(validate_solution(inst, sol.routes).has_value());
  }

  SUBCASE("size limit") {
    const Instance big = generate_instance(10, 1, 30, 5);
    CHECK_THROWS_WITH_AS(brute_force_optimal(big), doctest::Contains("too large"),
                         std::invalid_argument);
  }
}

TEST_CASE("oracle never loses to nearest neighbor") {
  Rng rng(6);
  for (int k = 0; k < 500; ++k) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 7));
    const int m = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const Instance inst = generate_instance(n, m, 30, 7000 + k);
    const Solution oracle = brute_force_optimal(inst);
    const Solution nn = nearest_neighbor_baseline(inst);
    CHECK(oracle.cost <= nn.cost + 1e-12);
    CHECK_FALSE(validate_solution(inst, oracle.routes).has_value());
  }
}

TEST_CASE("giant-tour oracle agrees with set-partition enumeration") {
  Rng rng(8);
  for (int k = 0; k < 200; ++k) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 5));
    const int m = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const Instance inst = generate_instance(n, m, k % 3 == 0 ? 12 : 30, 8000 + k);
    const double dp = brute_force_optimal(inst).cost;
    const double enumerated = partition_enumeration_optimal(inst);
    CHECK(std::abs(dp - enumerated) < 1e-12);
  }
}

TEST_CASE("gap metric") {
  CHECK(std::round(gap_percent(6.14, 6.10) * 100.0) / 100.0 == doctest::Approx(0.66));
  CHECK(std::round(gap_percent(5.48, 5.34) * 100.0) / 100.0 == doctest::Approx(2.62));
  CHECK(gap_percent(4.2, 4.2) == doctest::Approx(0.0));
  CHECK_THROWS_AS(gap_percent(1.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(gap_percent(1.0, -2.0), std::invalid_argument);
  CHECK(gap_percent(5.0, 4.0) > gap_percent(4.5, 4.0));
}

TEST_CASE("evaluate harness") {
  std::vector<Instance> dataset;
  for (int k = 0; k < 8; ++k) dataset.push_back(generate_instance(7, 1, 30, 900 + k));

  SUBCASE("single instance gives a single row") {
    const EvalReport r = evaluate(nearest_neighbor_baseline, {dataset[0]}, "nn");
    CHECK(r.per_instance.size() == 1);
    CHECK(r.problem_size == 7);
    CHECK_FALSE(r.failed);
  }

  SUBCASE("oracle mean never exceeds the nearest neighbor mean") {
    const EvalReport oracle = evaluate(brute_force_optimal, dataset, "oracle");
    const EvalReport nn = evaluate(nearest_neighbor_baseline, dataset, "nn");
    CHECK(oracle.mean_cost <= nn.mean_cost + 1e-12);
    CHECK(gap_percent(nn.mean_cost, oracle.mean_cost) >= 0.0);
  }

  SUBCASE("aggregate mean equals the mean of per-instance costs") {
    const EvalReport r = evaluate(nearest_neighbor_baseline, dataset, "nn");
    double sum = 0.0;
    for (const EvalRow& row : r.per_instance) sum += row.cost;
    CHECK(r.mean_cost == doctest::Approx(sum / dataset.size()).epsilon(1e-12));
  }

  SUBCASE("invalid solutions mark the report as failed") {
    const SolverFn broken = [](const Instance& inst) {
      Solution sol;
      sol.routes = {{inst.n(), 0, inst.n()}};  // drops every other customer
      sol.cost = tour_cost(inst, sol.routes);
      return sol;
    };
    const EvalReport r = evaluate(broken, dataset, "broken");
    CHECK(r.failed);
  }

  SUBCASE("parallel mode suppresses per-instance timings") {
    const EvalReport r = evaluate(nearest_neighbor_baseline, dataset, "nn", true);
    for (const EvalRow& row : r.per_instance) CHECK(row.wall_clock_s == 0.0);
    CHECK(r.mean_time_s == 0.0);
    CHECK_FALSE(r.failed);
  }
}

TEST_CASE("tradeoff curve basics") {
  ModelConfig cfg;
  cfg.h_dim = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  cfg.kind = ProblemKind::kCvrp;
  QNet net = init_qnet(cfg, 10);
  std::vector<Instance> dataset;
  for (int k = 0; k < 6; ++k) dataset.push_back(generate_instance(6, 1, 30, 1100 + k));

  const auto rows = tradeoff_curve(net, dataset, {1, 8, 16}, 1.0, 55);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].samples == 0);
  CHECK(rows[0].improvement_percent == 0.0);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].mean_cost <= rows[i - 1].mean_cost + 1e-12);  // nested seed streams
    CHECK(rows[i].improvement_percent >= -1e-12);
  }

  const auto path = (std::filesystem::temp_directory_path() / "routeq_tradeoff.csv").string();
  write_tradeoff_csv(path, rows);
  std::filesystem::remove(path);
}

TEST_CASE("generalization matrix") {
  ModelConfig cfg;
  cfg.h_dim = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.ff_dim = 16;
  cfg.kind = ProblemKind::kCvrp;

  SUBCASE("single checkpoint is its own best everywhere") {
    std::vector<std::pair<std::string, QNet>> ckpts;
    ckpts.emplace_back("only", init_qnet(cfg, 12));
    const GeneralizationResult r =
        generalization_matrix(ckpts, {4, 6}, DecodeMode{}, 5, 77);
    for (Eigen::Index c = 0; c < r.gap.cols(); ++c) CHECK(r.gap(0, c) == 0.0);
  }

  SUBCASE("entries recompute from the means") {
    std::vector<std::pair<std::string, QNet>> ckpts;
    ckpts.emplace_back("a", init_qnet(cfg, 13));
    ckpts.emplace_back("b", init_qnet(cfg, 14));
    const GeneralizationResult r =
        generalization_matrix(ckpts, {4, 6}, DecodeMode{}, 5, 78);
    for (Eigen::Index c = 0; c < r.gap.cols(); ++c) {
      const double best = r.mean_cost.col(c).minCoeff();
      for (Eigen::Index row = 0; row < r.gap.rows(); ++row)
        CHECK(r.gap(row, c) ==
              doctest::Approx(gap_percent(r.mean_cost(row, c), best)).epsilon(1e-12));
      CHECK(r.gap.col(c).minCoeff() == 0.0);
    }
    // 2x2 smoke report (values informational)
    MESSAGE("mean costs:\n", r.mean_cost);
  }
}
