#include "routeq/learner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "routeq/checkpoint.hpp"
#include "routeq/search.hpp"

namespace routeq {

using nlohmann::json;

// ---- SumTree ----------------------------------------------------------------

SumTree::SumTree(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw std::invalid_argument("SumTree: capacity must be >= 1");
  base_ = 1;
  while (base_ < capacity) base_ <<= 1;
  tree_.assign(static_cast<std::size_t>(2 * base_), 0.0);
}

void SumTree::update(int index, double value) {
  if (index < 0 || index >= capacity_) throw std::out_of_range("SumTree: bad index");
  if (!(value >= 0.0)) throw std::invalid_argument("SumTree: priorities must be >= 0");
  int node = base_ + index;
  tree_[node] = value;
  for (node >>= 1; node >= 1; node >>= 1)
    tree_[node] = tree_[2 * node] + tree_[2 * node + 1];
}

double SumTree::value_at(int index) const { return tree_[base_ + index]; }

int SumTree::find_prefix(double mass) const {
  int node = 1;
  while (node < base_) {
    const int left = 2 * node;
    if (mass < tree_[left]) {
      node = left;
    } else {
      mass -= tree_[left];
      node = left + 1;
    }
  }
  return std::min(node - base_, capacity_ - 1);
}

// ---- ReplayBuffer -------------------------------------------------------------

ReplayBuffer::ReplayBuffer(int capacity, double alpha, double eps_prio)
    : capacity_(capacity), alpha_(alpha), eps_prio_(eps_prio), tree_(capacity) {
  if (capacity < 1) throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
  if (alpha < 0.0) throw std::invalid_argument("ReplayBuffer: alpha must be >= 0");
  storage_.resize(capacity);
  raw_.assign(capacity, 0.0);
}

void ReplayBuffer::push(Transition transition) {
  storage_[next_] = std::move(transition);
  raw_[next_] = max_raw_;
  tree_.update(next_, std::pow(max_raw_, alpha_));
  next_ = (next_ + 1) % capacity_;
  size_ = std::min<std::size_t>(size_ + 1, capacity_);
}

SampledBatch ReplayBuffer::sample(int batch_size, double beta, Rng& rng) const {
  if (batch_size < 1) throw std::invalid_argument("sample: batch_size must be >= 1");
  if (static_cast<std::size_t>(batch_size) > size_)
    throw std::invalid_argument("sample: buffer holds " + std::to_string(size_) +
                                " transitions, need " + std::to_string(batch_size));
  const double total = tree_.total();
  if (!(total > 0.0)) throw std::logic_error("sample: empty priority mass");

  SampledBatch out;
  out.indices.reserve(batch_size);
  out.weights.reserve(batch_size);
  out.transitions.reserve(batch_size);
  const double stratum = total / batch_size;
  for (int j = 0; j < batch_size; ++j) {
    const double mass = (static_cast<double>(j) + rng.uniform()) * stratum;
    int idx = tree_.find_prefix(mass);
    idx = std::min<int>(idx, static_cast<int>(size_) - 1);
    out.indices.push_back(idx);
    const double p = tree_.value_at(idx) / total;
    out.weights.push_back(std::pow(static_cast<double>(size_) * p, -beta));
    out.transitions.push_back(&storage_[idx]);
  }
  const double wmax = *std::max_element(out.weights.begin(), out.weights.end());
  for (double& w : out.weights) w /= wmax;
  return out;
}

void ReplayBuffer::update_priorities(const std::vector<int>& indices,
                                     const std::vector<double>& abs_td) {
  if (indices.size() != abs_td.size())
    throw std::invalid_argument("update_priorities: size mismatch");
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const double raw = abs_td[k] + eps_prio_;
    raw_[indices[k]] = raw;
    max_raw_ = std::max(max_raw_, raw);
    tree_.update(indices[k], std::pow(raw, alpha_));
  }
}

// ---- NStepAccumulator ---------------------------------------------------------

NStepAccumulator::NStepAccumulator(int n, double gamma) : n_(n), gamma_(gamma) {
  if (n < 1) throw std::invalid_argument("NStepAccumulator: N must be >= 1");
}

std::vector<Transition> NStepAccumulator::feed(std::shared_ptr<const Instance> instance,
                                               const RoutingState& state, int action,
                                               double reward,
                                               const RoutingState& next_state, bool done) {
  window_.push_back(Pending{compact(state), action, 0.0, 0});
  for (Pending& p : window_) {
    p.acc += std::pow(gamma_, static_cast<double>(p.count)) * reward;
    p.count += 1;
  }
  std::vector<Transition> ready;
  if (done) {
    for (Pending& p : window_) {
      Transition t;
      t.instance = instance;
      t.state = std::move(p.state);
      t.action = p.action;
      t.n_step_reward = p.acc;
      t.next = std::nullopt;
      t.n_used = p.count;
      ready.push_back(std::move(t));
    }
    window_.clear();
  } else if (window_.front().count == n_) {
    Pending& p = window_.front();
    Transition t;
    t.instance = instance;
    t.state = std::move(p.state);
    t.action = p.action;
    t.n_step_reward = p.acc;
    t.next = compact(next_state);
    t.n_used = p.count;
    ready.push_back(std::move(t));
    window_.pop_front();
  }
  return ready;
}

// ---- config -------------------------------------------------------------------

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.h_dim = h_dim;
  m.n_blocks = n_blocks;
  m.n_heads = n_heads;
  m.ff_dim = ff_dim;
  m.kind = kind;
  return m;
}

void TrainConfig::validate() const {
  model_config().validate();
  if (n < 1 || depots < 1) throw std::invalid_argument("TrainConfig: n and depots must be >= 1");
  if (kind == ProblemKind::kCvrp && depots != 1)
    throw std::invalid_argument("TrainConfig: cvrp requires depots == 1");
  if (kind == ProblemKind::kMdvrp && depots < 2)
    throw std::invalid_argument("TrainConfig: mdvrp requires depots >= 2");
  if (effective_capacity() < 9)
    throw std::invalid_argument("TrainConfig: capacity must be >= 9");
  if (total_episodes < 1 || buffer_capacity < 1 || batch_size < 1)
    throw std::invalid_argument("TrainConfig: counts must be positive");
  if (batch_size > buffer_capacity)
    throw std::invalid_argument("TrainConfig: batch_size exceeds buffer capacity");
  if (n_step < 1) throw std::invalid_argument("TrainConfig: n_step must be >= 1");
  if (train_every < 1) throw std::invalid_argument("TrainConfig: train_every must be >= 1");
  if (eval_cadence < 1 || eval_count < 1)
    throw std::invalid_argument("TrainConfig: eval settings must be positive");
  if (exploration != "eps_greedy" && exploration != "boltzmann")
    throw std::invalid_argument("TrainConfig: unknown exploration mode " + exploration);
  if (exploration == "boltzmann" && (temp_start <= 0.0 || temp_end <= 0.0))
    throw std::invalid_argument("TrainConfig: temperatures must be positive");
}

namespace {

template <typename T>
void read_field(const json& section, const char* key, T& into) {
  if (section.contains(key)) into = section.at(key).get<T>();
}

json apply_overrides(json root, const std::vector<std::string>& overrides) {
  for (const std::string& kv : overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("override must look like section.key=value: " + kv);
    const std::string path = kv.substr(0, eq);
    const std::string value_text = kv.substr(eq + 1);
    json value;
    try {
      value = json::parse(value_text);
    } catch (const json::parse_error&) {
      value = value_text;  // bare strings stay strings
    }
    json* cursor = &root;
    std::size_t begin = 0;
    while (true) {
      const std::size_t dot = path.find('.', begin);
      const std::string key = path.substr(begin, dot - begin);
      if (key.empty()) throw std::invalid_argument("override has an empty key: " + kv);
      if (dot == std::string::npos) {
        (*cursor)[key] = value;
        break;
      }
      cursor = &(*cursor)[key];
      begin = dot + 1;
    }
  }
  return root;
}

TrainConfig train_config_from_json(const json& root) {
  TrainConfig cfg;
  if (root.contains("problem")) {
    const json& p = root.at("problem");
    if (p.contains("kind")) cfg.kind = problem_kind_from_string(p.at("kind").get<std::string>());
    read_field(p, "n", cfg.n);
    read_field(p, "depots", cfg.depots);
    read_field(p, "capacity", cfg.capacity);
  }
  if (cfg.kind == ProblemKind::kMdvrp && !root.value("problem", json::object()).contains("depots"))
    cfg.depots = 2;
  if (root.contains("model")) {
    const json& m = root.at("model");
    read_field(m, "h_dim", cfg.h_dim);
    read_field(m, "n_blocks", cfg.n_blocks);
    read_field(m, "n_heads", cfg.n_heads);
    read_field(m, "ff_dim", cfg.ff_dim);
  }
  if (root.contains("train")) {
    const json& t = root.at("train");
    read_field(t, "total_episodes", cfg.total_episodes);
    read_field(t, "buffer_capacity", cfg.buffer_capacity);
    read_field(t, "batch_size", cfg.batch_size);
    read_field(t, "lr", cfg.lr);
    read_field(t, "gamma", cfg.gamma);
    read_field(t, "n_step", cfg.n_step);
    read_field(t, "eps_start", cfg.eps_start);
    read_field(t, "eps_end", cfg.eps_end);
    read_field(t, "target_sync", cfg.target_sync);
    read_field(t, "alpha", cfg.alpha);
    read_field(t, "beta_start", cfg.beta_start);
    read_field(t, "beta_end", cfg.beta_end);
    read_field(t, "eps_prio", cfg.eps_prio);
    read_field(t, "warmup", cfg.warmup);
    read_field(t, "train_every", cfg.train_every);
    read_field(t, "seed", cfg.seed);
    read_field(t, "eval_cadence", cfg.eval_cadence);
    read_field(t, "eval_count", cfg.eval_count);
    read_field(t, "eval_seed", cfg.eval_seed);
    read_field(t, "exploration", cfg.exploration);
    read_field(t, "temp_start", cfg.temp_start);
    read_field(t, "temp_end", cfg.temp_end);
    read_field(t, "huber_delta", cfg.huber_delta);
  }
  cfg.validate();
  return cfg;
}

}  // namespace

TrainConfig parse_train_config_json(const std::string& json_text,
                                    const std::vector<std::string>& overrides) {
  json root = json::parse(json_text);
  return train_config_from_json(apply_overrides(std::move(root), overrides));
}

TrainConfig load_train_config(const std::string& path,
                              const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_train_config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_train_config_json(buf.str(), overrides);
}

std::string train_config_to_json(const TrainConfig& cfg) {
  json root{
      {"problem",
       {{"kind", to_string(cfg.kind)}, {"n", cfg.n}, {"depots", cfg.depots},
        {"capacity", cfg.capacity}}},
      {"model",
       {{"h_dim", cfg.h_dim}, {"n_blocks", cfg.n_blocks}, {"n_heads", cfg.n_heads},
        {"ff_dim", cfg.ff_dim}}},
      {"train",
       {{"total_episodes", cfg.total_episodes}, {"buffer_capacity", cfg.buffer_capacity},
        {"batch_size", cfg.batch_size}, {"lr", cfg.lr}, {"gamma", cfg.gamma},
        {"n_step", cfg.n_step}, {"eps_start", cfg.eps_start}, {"eps_end", cfg.eps_end},
        {"target_sync", cfg.target_sync}, {"alpha", cfg.alpha},
        {"beta_start", cfg.beta_start}, {"beta_end", cfg.beta_end},
        {"eps_prio", cfg.eps_prio}, {"warmup", cfg.warmup},
        {"train_every", cfg.train_every}, {"seed", cfg.seed},
        {"eval_cadence", cfg.eval_cadence}, {"eval_count", cfg.eval_count},
        {"eval_seed", cfg.eval_seed}, {"exploration", cfg.exploration},
        {"temp_start", cfg.temp_start}, {"temp_end", cfg.temp_end},
        {"huber_delta", cfg.huber_delta}}}};
  return root.dump(2);
}

// ---- schedules ----------------------------------------------------------------

double epsilon_at(long episode, const TrainConfig& cfg) {
  const double half = static_cast<double>(cfg.total_episodes) * 0.5;
  if (static_cast<double>(episode) >= half || half <= 0.0) return cfg.eps_end;
  return cfg.eps_start +
         (cfg.eps_end - cfg.eps_start) * (static_cast<double>(episode) / half);
}

double temperature_at(long episode, const TrainConfig& cfg) {
  const double half = static_cast<double>(cfg.total_episodes) * 0.5;
  if (static_cast<double>(episode) >= half || half <= 0.0) return cfg.temp_end;
  const double frac = static_cast<double>(episode) / half;
  return cfg.temp_start * std::pow(cfg.temp_end / cfg.temp_start, frac);
}

double beta_at(long episode, const TrainConfig& cfg) {
  const double frac = std::min(
      1.0, static_cast<double>(episode) / static_cast<double>(cfg.total_episodes));
  return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
}

// ---- action selection -----------------------------------------------------------

int argmax_feasible(const Eigen::VectorXd& q, const Mask& mask) {
  int best = -1;
  for (int a = 0; a < static_cast<int>(mask.size()); ++a) {
    if (!mask[a]) continue;
    if (best < 0 || q(a) > q(best)) best = a;
  }
  if (best < 0) throw std::invalid_argument("argmax_feasible: no feasible action");
  return best;
}

int select_action_eps_greedy(const Eigen::VectorXd& q, const Mask& mask, double eps,
                             Rng& rng) {
  int feasible = 0;
  for (std::uint8_t f : mask) feasible += f ? 1 : 0;
  if (feasible == 0) throw std::invalid_argument("select_action: no feasible action");
  if (rng.uniform() < eps) {
    int pick = static_cast<int>(rng.uniform_int(0, feasible - 1));
    for (int a = 0; a < static_cast<int>(mask.size()); ++a)
      if (mask[a] && pick-- == 0) return a;
  }
  return argmax_feasible(q, mask);
}

int select_action_boltzmann(const Eigen::VectorXd& q, const Mask& mask,
                            double temperature, Rng& rng) {
  if (temperature <= 0.0)
    throw std::invalid_argument("select_action: temperature must be > 0");
  double best = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < static_cast<int>(mask.size()); ++a)
    if (mask[a]) best = std::max(best, q(a) / temperature);
  if (!std::isfinite(best)) throw std::invalid_argument("select_action: no feasible action");
  std::vector<double> probs(mask.size(), 0.0);
  double total = 0.0;
  for (int a = 0; a < static_cast<int>(mask.size()); ++a)
    if (mask[a]) {
      probs[a] = std::exp(q(a) / temperature - best);
      total += probs[a];
    }
  double draw = rng.uniform() * total;
  int last_feasible = 0;
  for (int a = 0; a < static_cast<int>(mask.size()); ++a) {
    if (!mask[a]) continue;
    last_feasible = a;
    draw -= probs[a];
    if (draw < 0.0) return a;
  }
  return last_feasible;  // numeric edge: residual rounding
}

// ---- targets --------------------------------------------------------------------

Eigen::VectorXd td_targets(const std::vector<double>& rewards,
                           const std::vector<int>& n_used, double gamma,
                           const std::vector<NextStateEval>& next_evals) {
  if (rewards.size() != n_used.size() || rewards.size() != next_evals.size())
    throw std::invalid_argument("td_targets: size mismatch");
  Eigen::VectorXd y(static_cast<Eigen::Index>(rewards.size()));
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    const NextStateEval& ev = next_evals[i];
    if (ev.terminal) {
      y(static_cast<Eigen::Index>(i)) = rewards[i];
    } else {
      const int a_star = argmax_feasible(ev.q_online, ev.mask);
      y(static_cast<Eigen::Index>(i)) =
          rewards[i] +
          std::pow(gamma, static_cast<double>(n_used[i])) * ev.q_target(a_star);
    }
  }
  return y;
}

void sync_target(const QNet& online, QNet& target) {
  const ModelConfig& a = online.config;
  const ModelConfig& b = target.config;
  if (a.h_dim != b.h_dim || a.n_blocks != b.n_blocks || a.n_heads != b.n_heads ||
      a.ff_dim != b.ff_dim || a.kind != b.kind)
    throw std::invalid_argument("sync_target: model configs differ");
  target.params = online.params;
  target.stats = online.stats;
}

// ---- gradient step ----------------------------------------------------------------

StepMetrics train_step(QNet& online, QNet& target, ReplayBuffer& buffer,
                       ad::AdamState& adam, const TrainConfig& cfg, double beta,
                       Rng& sample_rng) {
  SampledBatch batch = buffer.sample(cfg.batch_size, beta, sample_rng);
  const int b_count = cfg.batch_size;

  std::vector<RoutingState> states;
  states.reserve(b_count);
  std::vector<RoutingState> next_states;
  std::vector<int> next_slot(b_count, -1);
  for (int i = 0; i < b_count; ++i) {
    const Transition& t = *batch.transitions[i];
    states.push_back(expand(t.state, *t.instance));
    if (t.next) next_slot[i] = static_cast<int>(next_states.size());
    if (t.next) next_states.push_back(expand(*t.next, *t.instance));
  }

  std::vector<NextStateEval> evals(b_count);
  if (!next_states.empty()) {
    std::vector<StateRef> next_refs;
    next_refs.reserve(next_states.size());
    for (int i = 0; i < b_count; ++i)
      if (next_slot[i] >= 0)
        next_refs.push_back({batch.transitions[i]->instance.get(), &next_states[next_slot[i]]});
    const Eigen::MatrixXd q_online_next = forward_batch(online, next_refs);
    const Eigen::MatrixXd q_target_next = forward_batch(target, next_refs);
    for (int i = 0; i < b_count; ++i) {
      if (next_slot[i] < 0) continue;
      const int s = next_slot[i];
      evals[i].terminal = false;
      evals[i].q_online = q_online_next.row(s);
      evals[i].q_target = q_target_next.row(s);
      evals[i].mask = feasible_actions(next_states[s], *batch.transitions[i]->instance);
    }
  }

  std::vector<double> rewards(b_count);
  std::vector<int> n_used(b_count);
  for (int i = 0; i < b_count; ++i) {
    rewards[i] = batch.transitions[i]->n_step_reward;
    n_used[i] = batch.transitions[i]->n_used;
  }
  const Eigen::VectorXd y = td_targets(rewards, n_used, cfg.gamma, evals);

  std::vector<StateRef> refs;
  refs.reserve(b_count);
  for (int i = 0; i < b_count; ++i)
    refs.push_back({batch.transitions[i]->instance.get(), &states[i]});

  ad::Tape tape(true);
  FeatureBatch fb = make_feature_batch(refs);
  NodeEmbeddings enc = encode(tape, online, fb, /*train=*/true, /*update_stats=*/true);
  ad::Var ctx = build_context(tape, online, enc, refs);
  ad::Var raw = q_values_raw(tape, online, enc, ctx);

  std::vector<std::pair<int, int>> coords;
  coords.reserve(b_count);
  for (int i = 0; i < b_count; ++i) coords.emplace_back(i, batch.transitions[i]->action);
  ad::Var preds = ad::gather_elements(raw, coords);

  ad::Matrix y_col = y;
  ad::Matrix w_col(b_count, 1);
  for (int i = 0; i < b_count; ++i) w_col(i, 0) = batch.weights[i];
  ad::Var diff = ad::sub(preds, tape.constant(std::move(y_col)));
  ad::Var weighted = ad::hadamard(ad::huber(diff, cfg.huber_delta),
                                  tape.constant(std::move(w_col)));
  ad::Var loss = ad::scale(ad::sum_all(weighted), 1.0 / static_cast<double>(b_count));

  StepMetrics metrics;
  metrics.loss = loss.scalar();
  if (!std::isfinite(metrics.loss)) {
    std::ostringstream msg;
    msg << "train_step: non-finite loss " << metrics.loss << " at adam step " << adam.t
        << " (batch size " << b_count << ")";
    throw std::runtime_error(msg.str());
  }

  online.params.zero_grads();
  tape.backward(loss);
  double grad_sq = 0.0;
  for (const auto& [name, tensor] : online.params) grad_sq += tensor.grad.squaredNorm();
  metrics.grad_norm = std::sqrt(grad_sq);
  ad::adam_step(online.params, adam, cfg.lr);

  std::vector<double> abs_td(b_count);
  double td_sum = 0.0;
  for (int i = 0; i < b_count; ++i) {
    abs_td[i] = std::abs(preds.val()(i, 0) - y(i));
    td_sum += abs_td[i];
  }
  buffer.update_priorities(batch.indices, abs_td);
  metrics.mean_abs_td = td_sum / b_count;
  return metrics;
}

// ---- training loop -----------------------------------------------------------------

namespace {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

constexpr std::uint64_t kTagTrainInstances = 0x7261696e696e7374ULL;
constexpr std::uint64_t kTagActions = 0x616374696f6e7367ULL;
constexpr std::uint64_t kTagSampling = 0x73616d706c657271ULL;
constexpr std::uint64_t kTagEvalSet = 0x6576616c73657471ULL;

}  // namespace

std::vector<Instance> make_eval_set(const TrainConfig& cfg) {
  std::vector<Instance> out;
  out.reserve(cfg.eval_count);
  for (int i = 0; i < cfg.eval_count; ++i)
    out.push_back(generate_instance(cfg.n, cfg.depots, cfg.effective_capacity(),
                                    mix_seed(mix_seed(cfg.eval_seed, kTagEvalSet),
                                             static_cast<std::uint64_t>(i))));
  return out;
}

TrainResult train(const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  QNet online = init_qnet(cfg.model_config(), cfg.seed);
  QNet target = init_qnet(cfg.model_config(), cfg.seed);
  sync_target(online, target);
  ad::AdamState adam;
  ReplayBuffer buffer(cfg.buffer_capacity, cfg.alpha, cfg.eps_prio);
  Rng action_rng(mix_seed(cfg.seed, kTagActions));
  Rng sample_rng(mix_seed(cfg.seed, kTagSampling));

  const std::vector<Instance> eval_set = make_eval_set(cfg);

  TrainResult result;
  result.metrics_csv = (fs::path(out_dir) / "metrics.csv").string();
  result.steps_csv = (fs::path(out_dir) / "steps.csv").string();
  result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  result.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();
  result.best_eval_cost = std::numeric_limits<double>::infinity();

  std::ofstream metrics_out(result.metrics_csv);
  std::ofstream steps_out(result.steps_csv);
  if (!metrics_out || !steps_out)
    throw std::runtime_error("train: cannot write logs under " + out_dir);
  metrics_out << "episode,samples,wall_clock_s,loss,mean_eval_cost,epsilon\n";
  steps_out << "step,episode,samples,loss,mean_abs_td,grad_norm,epsilon\n";

  {
    std::ofstream cfg_out((fs::path(out_dir) / "config.json").string());
    cfg_out << train_config_to_json(cfg) << '\n';
  }

  const auto start = std::chrono::steady_clock::now();
  const int min_fill = std::max(cfg.warmup, cfg.batch_size);
  double loss_accum = 0.0;
  long loss_count = 0;

  for (long episode = 0; episode < cfg.total_episodes; ++episode) {
    auto instance = std::make_shared<const Instance>(
        generate_instance(cfg.n, cfg.depots, cfg.effective_capacity(),
                          mix_seed(mix_seed(cfg.seed, kTagTrainInstances),
                                   static_cast<std::uint64_t>(episode))));
    const double eps = epsilon_at(episode, cfg);
    const double temp = temperature_at(episode, cfg);
    const double beta = beta_at(episode, cfg);
    const bool boltzmann = cfg.exploration == "boltzmann";

    RoutingState state = reset(*instance);
    NStepAccumulator acc(cfg.n_step, cfg.gamma);
    while (!state.done) {
      ForwardResult fwd = forward(online, *instance, state);
      const int action = boltzmann
                             ? select_action_boltzmann(fwd.q, fwd.mask, temp, action_rng)
                             : select_action_eps_greedy(fwd.q, fwd.mask, eps, action_rng);
      StepResult sr = step(state, action, *instance);
      for (Transition& t :
           acc.feed(instance, state, action, sr.reward, sr.state, sr.done))
        buffer.push(std::move(t));
      state = sr.state;
      result.samples += 1;

      if (buffer.size() >= static_cast<std::size_t>(min_fill) &&
          result.samples % cfg.train_every == 0) {
        StepMetrics m = train_step(online, target, buffer, adam, cfg, beta, sample_rng);
        result.train_steps += 1;
        loss_accum += m.loss;
        loss_count += 1;
        steps_out << result.train_steps << ',' << episode << ',' << result.samples << ','
                  << fmt_g17(m.loss) << ',' << fmt_g17(m.mean_abs_td) << ','
                  << fmt_g17(m.grad_norm) << ',' << fmt_g17(eps) << '\n';
        if (result.train_steps % cfg.target_sync == 0) sync_target(online, target);
      }
    }

    const long done_episodes = episode + 1;
    if (done_episodes % cfg.eval_cadence == 0 || done_episodes == cfg.total_episodes) {
      double cost_sum = 0.0;
      for (const Instance& inst : eval_set) cost_sum += solve_greedy(online, inst).cost;
      const double mean_cost = cost_sum / eval_set.size();
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      CurveRow row{done_episodes, result.samples, wall,
                   loss_count > 0 ? loss_accum / loss_count : 0.0, mean_cost,
                   epsilon_at(done_episodes, cfg)};
      result.curve.push_back(row);
      char wall_buf[32];
      std::snprintf(wall_buf, sizeof wall_buf, "%.3f", row.wall_clock_s);
      metrics_out << row.episode << ',' << row.samples << ',' << wall_buf << ','
                  << fmt_g17(row.loss) << ',' << fmt_g17(row.mean_eval_cost) << ','
                  << fmt_g17(row.epsilon) << '\n';
      metrics_out.flush();
      loss_accum = 0.0;
      loss_count = 0;
      if (mean_cost < result.best_eval_cost) {
        result.best_eval_cost = mean_cost;
        save_model(result.best_checkpoint, online, &adam);
      }
    }
  }

  save_model(result.last_checkpoint, online, &adam);
  return result;
}

}  // namespace routeq
