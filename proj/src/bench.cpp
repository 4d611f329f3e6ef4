#include "routeq/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "routeq/env.hpp"
#include "routeq/rng.hpp"

namespace routeq {

Solution nearest_neighbor_baseline(const Instance& instance) {
  const auto t0 = std::chrono::steady_clock::now();
  const int n = instance.n();
  std::vector<std::uint8_t> visited(n, 0);
  int remaining = n;
  Routes routes;

  while (remaining > 0) {
    // Start at the depot closest to the closest unvisited customer.
    int depot = instance.n();
    if (instance.is_mdvrp()) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < instance.m(); ++j)
        for (int c = 0; c < n; ++c)
          if (!visited[c]) {
            const double d = instance.distance(instance.n() + j, c);
            if (d < best) {
              best = d;
              depot = instance.n() + j;
            }
          }
    }
    std::vector<int> route{depot};
    int position = depot;
    int capacity = instance.capacity;
    while (true) {
      int pick = -1;
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < n; ++c) {
        if (visited[c] || instance.demands(c) > capacity) continue;
        const double d = instance.distance(position, c);
        if (d < best) {
          best = d;
          pick = c;
        }
      }
      if (pick < 0) break;
      visited[pick] = 1;
      --remaining;
      capacity -= instance.demands(pick);
      route.push_back(pick);
      position = pick;
    }
    route.push_back(depot);
    routes.push_back(std::move(route));
  }

  Solution sol;
  sol.cost = tour_cost(instance, routes);
  sol.routes = std::move(routes);
  sol.decode_mode = "nearest_neighbor";
  sol.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

namespace {

// Optimal capacity-respecting split of a fixed customer order into routes,
// choosing the best depot per route. Returns infinity when no feasible
// split exists (cannot happen with demands <= capacity).
double split_giant_tour(const Instance& instance, const Eigen::MatrixXd& dist,
                        const std::vector<int>& perm, std::vector<int>* cut_of = nullptr,
                        std::vector<int>* depot_of = nullptr) {
  const int n = static_cast<int>(perm.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> best(n + 1, inf);
  std::vector<int> cut(n + 1, -1), dep(n + 1, -1);
  best[0] = 0.0;
  for (int j = 1; j <= n; ++j) {
    int load = 0;
    double path = 0.0;
    // segment perm[i..j), growing leftwards
    for (int i = j - 1; i >= 0; --i) {
      load += instance.demands(perm[i]);
      if (load > instance.capacity) break;
      if (i + 1 < j) path += dist(perm[i], perm[i + 1]);
      if (best[i] == inf) continue;
      for (int d = 0; d < instance.m(); ++d) {
        const int depot = instance.n() + d;
        const double cost =
            best[i] + dist(depot, perm[i]) + path + dist(perm[j - 1], depot);
        if (cost < best[j]) {
          best[j] = cost;
          cut[j] = i;
          dep[j] = depot;
        }
      }
    }
  }
  if (cut_of) *cut_of = cut;
  if (depot_of) *depot_of = dep;
  return best[n];
}

Routes routes_from_split(const std::vector<int>& perm, const std::vector<int>& cut,
                         const std::vector<int>& dep) {
  Routes routes;
  int j = static_cast<int>(perm.size());
  while (j > 0) {
    const int i = cut[j];
    std::vector<int> route{dep[j]};
    for (int k = i; k < j; ++k) route.push_back(perm[k]);
    route.push_back(dep[j]);
    routes.push_back(std::move(route));
    j = i;
  }
  std::reverse(routes.begin(), routes.end());
  return routes;
}

}  // namespace

Solution brute_force_optimal(const Instance& instance) {
  if (instance.n() > 9)
    throw std::invalid_argument("brute_force_optimal: instance too large for oracle (n=" +
                                std::to_string(instance.n()) + " > 9)");
  const auto t0 = std::chrono::steady_clock::now();
  const Eigen::MatrixXd dist = distance_matrix(instance);

  std::vector<int> perm(instance.n());
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best_perm = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    const double cost = split_giant_tour(instance, dist, perm);
    if (cost < best_cost) {
      best_cost = cost;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::vector<int> cut, dep;
  split_giant_tour(instance, dist, best_perm, &cut, &dep);
  Solution sol;
  sol.routes = routes_from_split(best_perm, cut, dep);
  sol.cost = best_cost;
  sol.decode_mode = "oracle";
  sol.wall_clock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

double gap_percent(double mean, double best_mean) {
  if (!(best_mean > 0.0))
    throw std::invalid_argument("gap_percent: best mean must be positive");
  return 100.0 * (mean / best_mean - 1.0);
}

EvalReport evaluate(const SolverFn& solver, const std::vector<Instance>& dataset,
                    const std::string& method_label, bool parallel) {
  EvalReport report;
  report.method = method_label;
  report.problem_size = dataset.empty() ? 0 : dataset.front().n();
  report.per_instance.resize(dataset.size());

  const auto run_one = [&](std::size_t i) {
    const Instance& inst = dataset[i];
    const auto t0 = std::chrono::steady_clock::now();
    Solution sol = solver(inst);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EvalRow& row = report.per_instance[i];
    row.id = inst.id;
    row.cost = sol.cost;
    row.wall_clock_s = parallel ? 0.0 : wall;
    row.valid = !validate_solution(inst, sol.routes).has_value();
  };

  const auto t_total = std::chrono::steady_clock::now();
  if (parallel) {
    const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
    std::atomic<std::size_t> cursor{0};
    std::vector<std::future<void>> futs;
    for (unsigned w = 0; w < workers; ++w)
      futs.push_back(std::async(std::launch::async, [&]() {
        for (std::size_t i = cursor.fetch_add(1); i < dataset.size();
             i = cursor.fetch_add(1))
          run_one(i);
      }));
    for (auto& f : futs) f.get();
  } else {
    for (std::size_t i = 0; i < dataset.size(); ++i) run_one(i);
  }
  report.total_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_total).count();

  double sum = 0.0, time_sum = 0.0;
  for (const EvalRow& row : report.per_instance) {
    sum += row.cost;
    time_sum += row.wall_clock_s;
    report.failed = report.failed || !row.valid;
  }
  const double count = static_cast<double>(report.per_instance.size());
  if (count > 0) {
    report.mean_cost = sum / count;
    double sq = 0.0;
    for (const EvalRow& row : report.per_instance)
      sq += (row.cost - report.mean_cost) * (row.cost - report.mean_cost);
    report.std_cost = count > 1 ? std::sqrt(sq / (count - 1)) : 0.0;
    report.mean_time_s = parallel ? 0.0 : time_sum / count;
  }
  return report;
}

std::vector<TradeoffRow> tradeoff_curve(QNet& net, const std::vector<Instance>& dataset,
                                        const std::vector<int>& sample_counts,
                                        double temperature, std::uint64_t seed) {
  if (dataset.empty()) throw std::invalid_argument("tradeoff_curve: empty dataset");
  const auto instance_seed = [seed](std::size_t i) {
    return mix_seed(seed, 0x74726164ULL + static_cast<std::uint64_t>(i));
  };

  std::vector<TradeoffRow> rows;
  double greedy_sum = 0.0;
  for (const Instance& inst : dataset) greedy_sum += solve_greedy(net, inst).cost;
  const double greedy_mean = greedy_sum / dataset.size();
  rows.push_back(TradeoffRow{0, greedy_mean, 0.0});

  for (int s : sample_counts) {
    double sum = 0.0;
    for (std::size_t i = 0; i < dataset.size(); ++i)
      sum += solve_sampling(net, dataset[i], s, temperature, instance_seed(i)).cost;
    const double mean = sum / dataset.size();
    rows.push_back(TradeoffRow{s, mean, 100.0 * (greedy_mean - mean) / greedy_mean});
  }
  return rows;
}

GeneralizationResult generalization_matrix(
    std::vector<std::pair<std::string, QNet>>& checkpoints, const std::vector<int>& sizes,
    const DecodeMode& mode, int instances_per_size, std::uint64_t seed) {
  if (checkpoints.empty())
    throw std::invalid_argument("generalization_matrix: need at least one checkpoint");
  const ProblemKind kind = checkpoints.front().second.config.kind;
  for (const auto& [label, net] : checkpoints)
    if (net.config.kind != kind)
      throw std::invalid_argument("generalization_matrix: mixed problem kinds");
  const int depots = kind == ProblemKind::kCvrp ? 1 : 2;

  GeneralizationResult result;
  result.sizes = sizes;
  for (const auto& [label, net] : checkpoints) result.labels.push_back(label);
  result.mean_cost.resize(static_cast<Eigen::Index>(checkpoints.size()),
                          static_cast<Eigen::Index>(sizes.size()));
  result.gap.resize(result.mean_cost.rows(), result.mean_cost.cols());

  for (std::size_t si = 0; si < sizes.size(); ++si) {
    std::vector<Instance> dataset;
    dataset.reserve(instances_per_size);
    for (int i = 0; i < instances_per_size; ++i)
      dataset.push_back(generate_instance(
          sizes[si], depots, default_capacity(sizes[si]),
          mix_seed(mix_seed(seed, static_cast<std::uint64_t>(sizes[si])),
                   static_cast<std::uint64_t>(i))));
    for (std::size_t ci = 0; ci < checkpoints.size(); ++ci) {
      QNet& net = checkpoints[ci].second;
      double sum = 0.0;
      for (std::size_t k = 0; k < dataset.size(); ++k)
        sum += mode.sampling
                   ? solve_sampling(net, dataset[k], mode.samples, mode.temperature,
                                    mix_seed(mode.seed, static_cast<std::uint64_t>(k)))
                         .cost
                   : solve_greedy(net, dataset[k]).cost;
      result.mean_cost(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(si)) =
          sum / dataset.size();
    }
    const double best = result.mean_cost.col(static_cast<Eigen::Index>(si)).minCoeff();
    for (std::size_t ci = 0; ci < checkpoints.size(); ++ci)
      result.gap(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(si)) =
          gap_percent(
              result.mean_cost(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(si)),
              best);
  }
  return result;
}

void write_tradeoff_csv(const std::string& path, const std::vector<TradeoffRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_tradeoff_csv: cannot open " + path);
  out << "samples,mean_cost,improvement_percent_vs_greedy\n";
  for (const TradeoffRow& row : rows)
    out << row.samples << ',' << row.mean_cost << ',' << row.improvement_percent << '\n';
}

void write_generalization_csv(const std::string& path, const GeneralizationResult& result) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_generalization_csv: cannot open " + path);
  out << "checkpoint,eval_size,mean_cost,gap_percent\n";
  for (Eigen::Index r = 0; r < result.mean_cost.rows(); ++r)
    for (Eigen::Index c = 0; c < result.mean_cost.cols(); ++c)
      out << result.labels[static_cast<std::size_t>(r)] << ','
          << result.sizes[static_cast<std::size_t>(c)] << ',' << result.mean_cost(r, c)
          << ',' << result.gap(r, c) << '\n';
}

void write_eval_reports_json(const std::string& path,
                             const std::vector<EvalReport>& reports) {
  nlohmann::json root;
  root["methods"] = nlohmann::json::array();
  double best_mean = std::numeric_limits<double>::infinity();
  for (const EvalReport& r : reports)
    if (!r.per_instance.empty()) best_mean = std::min(best_mean, r.mean_cost);
  for (const EvalReport& r : reports) {
    nlohmann::json per = nlohmann::json::array();
    for (const EvalRow& row : r.per_instance)
      per.push_back({{"id", row.id},
                     {"cost", row.cost},
                     {"wall_clock_s", row.wall_clock_s},
                     {"valid", row.valid}});
    nlohmann::json entry{{"method", r.method},
                         {"problem_size", r.problem_size},
                         {"per_instance", per},
                         {"aggregate",
                          {{"mean_cost", r.mean_cost},
                           {"std_cost", r.std_cost},
                           {"mean_time_s", r.mean_time_s},
                           {"total_time_s", r.total_time_s}}},
                         {"failed", r.failed}};
    if (!r.per_instance.empty() && std::isfinite(best_mean))
      entry["gap_percent"] = gap_percent(r.mean_cost, best_mean);
    root["methods"].push_back(entry);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_eval_reports_json: cannot open " + path);
  out << root.dump(2) << '\n';
}

}  // namespace routeq
