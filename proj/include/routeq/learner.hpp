#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "routeq/env.hpp"
#include "routeq/instance.hpp"
#include "routeq/qnet.hpp"
#include "routeq/rng.hpp"

namespace routeq {

// One replay entry. States are stored compactly; features and masks are
// recomputed when the transition is sampled.
struct Transition {
  std::shared_ptr<const Instance> instance;
  CompactState state;
  int action = 0;
  double n_step_reward = 0.0;
  std::optional<CompactState> next;  // nullopt when the episode ended in the window
  int n_used = 1;
};

// Array-backed binary sum tree over fixed leaf slots.
class SumTree {
 public:
  explicit SumTree(int capacity);
  void update(int index, double value);
  double value_at(int index) const;
  double total() const { return tree_[1]; }
  // Largest-index leaf whose prefix sum exceeds mass; mass in [0, total).
  int find_prefix(double mass) const;

 private:
  int capacity_;
  int base_;
  std::vector<double> tree_;
};

struct SampledBatch {
  std::vector<int> indices;
  std::vector<double> weights;  // importance weights, normalized by batch max
  std::vector<const Transition*> transitions;
};

// Proportional prioritized replay: P(i) = p_i^alpha / sum p^alpha, sampled
// stratified through the sum tree. New transitions enter at the running max
// priority; a full buffer evicts the oldest entry.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity, double alpha, double eps_prio = 1e-3);

  void push(Transition transition);
  SampledBatch sample(int batch_size, double beta, Rng& rng) const;
  // Sets priorities to |td| + eps_prio.
  void update_priorities(const std::vector<int>& indices,
                         const std::vector<double>& abs_td);

  std::size_t size() const { return size_; }
  int capacity() const { return capacity_; }
  double alpha() const { return alpha_; }
  double eps_prio() const { return eps_prio_; }
  double raw_priority(int index) const { return raw_[index]; }
  double tree_total() const { return tree_.total(); }
  const Transition& at(int index) const { return storage_[index]; }

 private:
  int capacity_;
  double alpha_;
  double eps_prio_;
  std::vector<Transition> storage_;
  std::vector<double> raw_;
  SumTree tree_;
  int next_ = 0;
  std::size_t size_ = 0;
  double max_raw_ = 1.0;
};

// Folds consecutive rewards into N-step returns as an episode streams in.
class NStepAccumulator {
 public:
  NStepAccumulator(int n, double gamma);
  // Returns the transitions completed by this step (all pending ones when
  // done is set).
  std::vector<Transition> feed(std::shared_ptr<const Instance> instance,
                               const RoutingState& state, int action, double reward,
                               const RoutingState& next_state, bool done);

 private:
  struct Pending {
    CompactState state;
    int action;
    double acc = 0.0;
    int count = 0;
  };
  int n_;
  double gamma_;
  std::deque<Pending> window_;
};

struct TrainConfig {
  // problem
  ProblemKind kind = ProblemKind::kCvrp;
  int n = 20;
  int depots = 1;
  int capacity = 0;  // 0 -> default_capacity(n)
  // model
  int h_dim = 128;
  int n_blocks = 3;
  int n_heads = 8;
  int ff_dim = 512;
  // training
  long total_episodes = 10000;
  int buffer_capacity = 100000;
  int batch_size = 128;
  double lr = 1e-4;
  double gamma = 1.0;
  int n_step = 1;
  double eps_start = 1.0;
  double eps_end = 0.05;
  long target_sync = 1000;  // gradient steps between hard target copies
  double alpha = 0.6;
  double beta_start = 0.4;
  double beta_end = 1.0;
  double eps_prio = 1e-3;
  int warmup = 1000;     // transitions collected before the first gradient step
  int train_every = 1;   // environment steps per gradient step
  std::uint64_t seed = 1;
  long eval_cadence = 500;
  int eval_count = 200;
  std::uint64_t eval_seed = 999983;
  std::string exploration = "eps_greedy";  // or "boltzmann"
  double temp_start = 2.0;
  double temp_end = 0.1;
  double huber_delta = 1.0;

  int effective_capacity() const { return capacity > 0 ? capacity : default_capacity(n); }
  ModelConfig model_config() const;
  void validate() const;
};

// JSON config file; overrides are dotted key=value pairs, e.g. "train.lr=5e-4".
TrainConfig load_train_config(const std::string& path,
                              const std::vector<std::string>& overrides = {});
TrainConfig parse_train_config_json(const std::string& json_text,
                                    const std::vector<std::string>& overrides = {});
std::string train_config_to_json(const TrainConfig& config);

// Linear decay from eps_start to eps_end over the first half of the
// episodes, constant afterwards.
double epsilon_at(long episode, const TrainConfig& config);
// Exponential decay for the Boltzmann temperature over the same span.
double temperature_at(long episode, const TrainConfig& config);
double beta_at(long episode, const TrainConfig& config);

int argmax_feasible(const Eigen::VectorXd& q, const Mask& mask);
int select_action_eps_greedy(const Eigen::VectorXd& q, const Mask& mask, double eps,
                             Rng& rng);
int select_action_boltzmann(const Eigen::VectorXd& q, const Mask& mask,
                            double temperature, Rng& rng);

// Next-state quantities entering the Double DQN target.
struct NextStateEval {
  bool terminal = true;
  Eigen::VectorXd q_online;
  Eigen::VectorXd q_target;
  Mask mask;
};

// y_i = R_i + gamma^n_i * Q_target(s', argmax_feasible Q_online(s'));
// terminal entries bootstrap nothing.
Eigen::VectorXd td_targets(const std::vector<double>& rewards,
                           const std::vector<int>& n_used, double gamma,
                           const std::vector<NextStateEval>& next_evals);

// Hard copy of parameters and batch norm running stats.
void sync_target(const QNet& online, QNet& target);

struct StepMetrics {
  double loss = 0.0;
  double mean_abs_td = 0.0;
  double grad_norm = 0.0;
};

StepMetrics train_step(QNet& online, QNet& target, ReplayBuffer& buffer,
                       ad::AdamState& adam, const TrainConfig& config, double beta,
                       Rng& sample_rng);

struct CurveRow {
  long episode = 0;
  long samples = 0;
  double wall_clock_s = 0.0;
  double loss = 0.0;
  double mean_eval_cost = 0.0;
  double epsilon = 0.0;
};

struct TrainResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string metrics_csv;
  std::string steps_csv;
  std::vector<CurveRow> curve;
  double best_eval_cost = 0.0;
  long train_steps = 0;
  long samples = 0;
};

// The fixed held-out set train() evaluates greedily on eval_cadence.
std::vector<Instance> make_eval_set(const TrainConfig& config);

// Full training loop: fresh instance every episode, exploration rollouts,
// prioritized replay updates, periodic target sync, periodic greedy
// evaluation on a fixed held-out set, best-checkpoint tracking. Writes
// metrics.csv (eval cadence; includes wall clock) and steps.csv (one
// deterministic row per gradient step) under out_dir.
TrainResult train(const TrainConfig& config, const std::string& out_dir);

}  // namespace routeq
