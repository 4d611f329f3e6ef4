#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "routeq/bench.hpp"
#include "routeq/instance.hpp"
#include "routeq/learner.hpp"
#include "routeq/qnet.hpp"
#include "routeq/search.hpp"

namespace {

using namespace routeq;

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<int> split_csv_ints(const std::string& text) {
  std::vector<int> out;
  for (const std::string& s : split_csv(text)) out.push_back(std::stoi(s));
  return out;
}

int cmd_gen(int n, int depots, int capacity, int count, std::uint64_t seed,
            const std::string& out_path) {
  if (capacity == 0) capacity = default_capacity(n);
  std::vector<Instance> instances;
  instances.reserve(count);
  for (int i = 0; i < count; ++i) {
    Instance inst =
        generate_instance(n, depots, capacity, mix_seed(seed, static_cast<std::uint64_t>(i)));
    inst.id += "-" + std::to_string(i);
    instances.push_back(std::move(inst));
  }
  save_dataset(out_path, instances);
  std::cout << "wrote " << instances.size() << " instances to " << out_path << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir) {
  TrainConfig cfg = load_train_config(config_path, overrides);
  TrainResult result = train(cfg, out_dir);
  std::cout << "episodes=" << cfg.total_episodes << " train_steps=" << result.train_steps
            << " samples=" << result.samples << " best_eval_cost=" << result.best_eval_cost
            << '\n'
            << "best checkpoint: " << result.best_checkpoint << '\n'
            << "metrics: " << result.metrics_csv << '\n';
  return 0;
}

int cmd_solve(const std::string& checkpoint, const std::string& instances_path,
              const std::string& mode, int samples, double temperature,
              std::uint64_t seed, const std::string& out_path) {
  QNet net = load_model(checkpoint);
  const std::vector<Instance> instances = load_dataset(instances_path);
  std::ofstream out(out_path);
  if (!out) throw std::runtime_error("solve: cannot open " + out_path);
  double total = 0.0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    Solution sol =
        mode == "greedy"
            ? solve_greedy(net, instances[i])
            : solve_sampling(net, instances[i], samples, temperature,
                             mix_seed(seed, static_cast<std::uint64_t>(i)));
    total += sol.cost;
    out << solution_to_json(sol, instances[i].id) << '\n';
  }
  std::cout << "solved " << instances.size() << " instances, mean cost "
            << (instances.empty() ? 0.0 : total / instances.size()) << ", wrote "
            << out_path << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& instances_path,
             const std::string& baselines, const std::string& report_path,
             const std::string& mode, int samples, double temperature,
             std::uint64_t seed, bool parallel) {
  const std::vector<Instance> instances = load_dataset(instances_path);
  std::vector<EvalReport> reports;

  if (!checkpoint.empty()) {
    QNet net = load_model(checkpoint);
    if (mode == "greedy" || mode == "both")
      reports.push_back(evaluate(
          [&net](const Instance& inst) { return solve_greedy(net, inst); }, instances,
          "greedy", parallel));
    if (mode == "sample" || mode == "both")
      reports.push_back(evaluate(
          [&](const Instance& inst) {
            return solve_sampling(net, inst, samples, temperature,
                                  mix_seed(seed, std::hash<std::string>{}(inst.id)));
          },
          instances, "sample_" + std::to_string(samples), parallel));
  }
  for (const std::string& baseline : split_csv(baselines)) {
    if (baseline == "nn") {
      reports.push_back(evaluate(nearest_neighbor_baseline, instances, "nearest_neighbor",
                                 parallel));
    } else if (baseline == "oracle") {
      reports.push_back(evaluate(brute_force_optimal, instances, "oracle", parallel));
    } else {
      throw std::invalid_argument("unknown baseline: " + baseline +
                                  " (expected nn and/or oracle)");
    }
  }
  if (reports.empty())
    throw std::invalid_argument("eval: nothing to evaluate (no checkpoint, no baselines)");

  write_eval_reports_json(report_path, reports);
  double best = std::numeric_limits<double>::infinity();
  for (const EvalReport& r : reports) best = std::min(best, r.mean_cost);
  for (const EvalReport& r : reports)
    std::cout << r.method << ": mean=" << r.mean_cost << " gap=" << gap_percent(r.mean_cost, best)
              << "% mean_time=" << r.mean_time_s << "s" << (r.failed ? " FAILED" : "")
              << '\n';
  std::cout << "report: " << report_path << '\n';
  for (const EvalReport& r : reports)
    if (r.failed) return 2;
  return 0;
}

int cmd_tradeoff(const std::string& checkpoint, const std::string& instances_path,
                 const std::string& samples_csv, double temperature, std::uint64_t seed,
                 const std::string& out_path) {
  QNet net = load_model(checkpoint);
  const std::vector<Instance> instances = load_dataset(instances_path);
  const std::vector<int> counts = split_csv_ints(samples_csv);
  const std::vector<TradeoffRow> rows =
      tradeoff_curve(net, instances, counts, temperature, seed);
  write_tradeoff_csv(out_path, rows);
  for (const TradeoffRow& row : rows)
    std::cout << (row.samples == 0 ? std::string("greedy") : std::to_string(row.samples))
              << ": mean=" << row.mean_cost << " improvement=" << row.improvement_percent
              << "%\n";
  std::cout << "curve: " << out_path << '\n';
  return 0;
}

int cmd_generalize(const std::string& checkpoints_csv, const std::string& sizes_csv,
                   int count, std::uint64_t seed, const std::string& mode, int samples,
                   double temperature, const std::string& out_path) {
  std::vector<std::pair<std::string, QNet>> checkpoints;
  for (const std::string& path : split_csv(checkpoints_csv))
    checkpoints.emplace_back(path, load_model(path));
  DecodeMode decode;
  decode.sampling = mode == "sample";
  decode.samples = samples;
  decode.temperature = temperature;
  decode.seed = seed;
  GeneralizationResult result = generalization_matrix(
      checkpoints, split_csv_ints(sizes_csv), decode, count, seed);
  write_generalization_csv(out_path, result);
  std::cout << "matrix (" << result.labels.size() << " checkpoints x "
            << result.sizes.size() << " sizes) written to " << out_path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention Q-network solver for CVRP/MDVRP"};
  app.require_subcommand(1);

  // gen
  int g_n = 20, g_depots = 1, g_capacity = 0, g_count = 100;
  std::uint64_t g_seed = 1;
  std::string g_out;
  CLI::App* gen = app.add_subcommand("gen", "generate a JSON-lines dataset");
  gen->add_option("--n", g_n, "customers per instance")->required();
  gen->add_option("--depots", g_depots, "depot count (1 = CVRP)");
  gen->add_option("--capacity", g_capacity, "vehicle capacity (0 = size default)");
  gen->add_option("--count", g_count, "number of instances");
  gen->add_option("--seed", g_seed, "base seed");
  gen->add_option("--out", g_out, "output file")->required();

  // train
  std::string t_config, t_out_dir;
  std::vector<std::string> t_overrides;
  CLI::App* tr = app.add_subcommand("train", "train a model from a JSON config");
  tr->add_option("--config", t_config, "config file")->required();
  tr->add_option("--set", t_overrides, "override, e.g. --set train.lr=5e-4");
  tr->add_option("--out-dir", t_out_dir, "output directory")->required();

  // solve
  std::string s_ckpt, s_instances, s_mode = "greedy", s_out;
  int s_samples = 64;
  double s_temperature = 1.0;
  std::uint64_t s_seed = 1;
  CLI::App* solve = app.add_subcommand("solve", "solve instances with a checkpoint");
  solve->add_option("--checkpoint", s_ckpt)->required();
  solve->add_option("--instances", s_instances)->required();
  solve->add_option("--mode", s_mode)->check(CLI::IsMember({"greedy", "sample"}));
  solve->add_option("--samples", s_samples);
  solve->add_option("--temperature", s_temperature);
  solve->add_option("--seed", s_seed);
  solve->add_option("--out", s_out)->required();

  // eval
  std::string e_ckpt, e_instances, e_baselines, e_report, e_mode = "greedy";
  int e_samples = 64;
  double e_temperature = 1.0;
  std::uint64_t e_seed = 1;
  bool e_parallel = false;
  CLI::App* ev = app.add_subcommand("eval", "evaluate checkpoint and baselines");
  ev->add_option("--checkpoint", e_ckpt);
  ev->add_option("--instances", e_instances)->required();
  ev->add_option("--baselines", e_baselines, "comma list of nn,oracle");
  ev->add_option("--report", e_report)->required();
  ev->add_option("--mode", e_mode)->check(CLI::IsMember({"greedy", "sample", "both"}));
  ev->add_option("--samples", e_samples);
  ev->add_option("--temperature", e_temperature);
  ev->add_option("--seed", e_seed);
  ev->add_flag("--parallel", e_parallel, "parallelize (suppresses per-instance timings)");

  // tradeoff
  std::string to_ckpt, to_instances, to_samples = "1,16,64,256,1024", to_out;
  double to_temperature = 1.0;
  std::uint64_t to_seed = 1;
  CLI::App* to = app.add_subcommand("tradeoff", "sample-count trade-off curve");
  to->add_option("--checkpoint", to_ckpt)->required();
  to->add_option("--instances", to_instances)->required();
  to->add_option("--samples", to_samples, "comma list of sample counts");
  to->add_option("--temperature", to_temperature);
  to->add_option("--seed", to_seed);
  to->add_option("--out", to_out)->required();

  // generalize
  std::string ge_ckpts, ge_sizes = "20,50,100", ge_mode = "greedy", ge_out;
  int ge_count = 100, ge_samples = 64;
  double ge_temperature = 1.0;
  std::uint64_t ge_seed = 1;
  CLI::App* ge = app.add_subcommand("generalize", "cross-size generalization matrix");
  ge->add_option("--checkpoints", ge_ckpts, "comma list of checkpoint paths")->required();
  ge->add_option("--sizes", ge_sizes, "comma list of customer counts");
  ge->add_option("--count", ge_count, "instances per size");
  ge->add_option("--seed", ge_seed);
  ge->add_option("--mode", ge_mode)->check(CLI::IsMember({"greedy", "sample"}));
  ge->add_option("--samples", ge_samples);
  ge->add_option("--temperature", ge_temperature);
  ge->add_option("--out", ge_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen(g_n, g_depots, g_capacity, g_count, g_seed, g_out);
    if (tr->parsed()) return cmd_train(t_config, t_overrides, t_out_dir);
    if (solve->parsed())
      return cmd_solve(s_ckpt, s_instances, s_mode, s_samples, s_temperature, s_seed, s_out);
    if (ev->parsed())
      return cmd_eval(e_ckpt, e_instances, e_baselines, e_report, e_mode, e_samples,
                      e_temperature, e_seed, e_parallel);
    if (to->parsed())
      return cmd_tradeoff(to_ckpt, to_instances, to_samples, to_temperature, to_seed, to_out);
    if (ge->parsed())
      return cmd_generalize(ge_ckpts, ge_sizes, ge_count, ge_seed, ge_mode, ge_samples,
                            ge_temperature, ge_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
