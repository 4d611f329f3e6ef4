#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "routeq/instance.hpp"
#include "routeq/qnet.hpp"
#include "routeq/search.hpp"

namespace routeq {

// Greedy nearest-feasible construction. Each route opens at the depot
// closest to the closest unvisited customer and closes when nothing fits.
Solution nearest_neighbor_baseline(const Instance& instance);

// Exact solver for n <= 9: enumerates customer permutations and optimally
// splits each giant tour into capacity-feasible routes (best depot per route)
// by dynamic programming.
Solution brute_force_optimal(const Instance& instance);

// 100 * (mean / best_mean - 1); requires best_mean > 0.
double gap_percent(double mean, double best_mean);

struct EvalRow {
  std::string id;
  double cost = 0.0;
  double wall_clock_s = 0.0;
  bool valid = false;
};

struct EvalReport {
  std::string method;
  int problem_size = 0;
  std::vector<EvalRow> per_instance;
  double mean_cost = 0.0;
  double std_cost = 0.0;
  double mean_time_s = 0.0;
  double total_time_s = 0.0;
  bool failed = false;  // any invalid solution
};

using SolverFn = std::function<Solution(const Instance&)>;

// Solves one instance at a time, timing each, validating every solution.
// With parallel set, instances are solved concurrently and per-instance
// timings are suppressed (reported as 0).
EvalReport evaluate(const SolverFn& solver, const std::vector<Instance>& dataset,
                    const std::string& method_label, bool parallel = false);

struct TradeoffRow {
  int samples = 0;  // 0 marks the greedy row
  double mean_cost = 0.0;
  double improvement_percent = 0.0;  // vs greedy mean
};

// One sampling evaluation per requested S plus the greedy row. Per-instance
// seed streams are shared across the S values, so the mean is non-increasing.
std::vector<TradeoffRow> tradeoff_curve(QNet& net, const std::vector<Instance>& dataset,
                                        const std::vector<int>& sample_counts,
                                        double temperature, std::uint64_t seed);

struct DecodeMode {
  bool sampling = false;
  int samples = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct GeneralizationResult {
  std::vector<std::string> labels;  // one per checkpoint
  std::vector<int> sizes;
  Eigen::MatrixXd mean_cost;  // labels x sizes
  Eigen::MatrixXd gap;        // percentage gap to the best checkpoint per size
};

// Evaluates every checkpoint on freshly generated datasets of each size and
// reports the gap to the per-size best mean.
GeneralizationResult generalization_matrix(
    std::vector<std::pair<std::string, QNet>>& checkpoints, const std::vector<int>& sizes,
    const DecodeMode& mode, int instances_per_size, std::uint64_t seed);

void write_tradeoff_csv(const std::string& path, const std::vector<TradeoffRow>& rows);
void write_generalization_csv(const std::string& path, const GeneralizationResult& result);
// Report for several methods over one dataset, with per-method gap to the
// best mean in the set.
void write_eval_reports_json(const std::string& path,
                             const std::vector<EvalReport>& reports);

}  // namespace routeq
