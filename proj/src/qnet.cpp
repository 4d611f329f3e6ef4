#include "routeq/qnet.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "routeq/checkpoint.hpp"
#include "routeq/rng.hpp"

namespace routeq {

using ad::Matrix;
using ad::Var;

std::string to_string(ProblemKind kind) {
  return kind == ProblemKind::kCvrp ? "cvrp" : "mdvrp";
}

ProblemKind problem_kind_from_string(const std::string& s) {
  if (s == "cvrp") return ProblemKind::kCvrp;
  if (s == "mdvrp") return ProblemKind::kMdvrp;
  throw std::invalid_argument("unknown problem kind: " + s);
}

void ModelConfig::validate() const {
  if (h_dim < 1 || n_heads < 1 || ff_dim < 1 || n_blocks < 0)
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  if (h_dim % n_heads != 0)
    throw std::invalid_argument("ModelConfig: h_dim " + std::to_string(h_dim) +
                                " not divisible by n_heads " + std::to_string(n_heads));
}

namespace {

Matrix uniform_init(Rng& rng, int rows, int cols, int fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

std::string block_prefix(int l) { return "enc.l" + std::to_string(l) + "."; }

}  // namespace

ad::ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(mix_seed(seed, 0x716e6574ULL));
  ad::ParamStore store;
  const int f = config.n_node_features();
  const int h = config.h_dim;

  store.add("embed.customer.W", uniform_init(rng, f, h, f));
  store.add("embed.customer.b", uniform_init(rng, 1, h, f));
  store.add("embed.depot.W", uniform_init(rng, f, h, f));
  store.add("embed.depot.b", uniform_init(rng, 1, h, f));

  for (int l = 0; l < config.n_blocks; ++l) {
    const std::string p = block_prefix(l);
    store.add(p + "mha.Wq", uniform_init(rng, h, h, h));
    store.add(p + "mha.Wk", uniform_init(rng, h, h, h));
    store.add(p + "mha.Wv", uniform_init(rng, h, h, h));
    store.add(p + "mha.Wo", uniform_init(rng, h, h, h));
    store.add(p + "bn1.gamma", Matrix::Ones(1, h));
    store.add(p + "bn1.beta", Matrix::Zero(1, h));
    store.add(p + "ff.W1", uniform_init(rng, h, config.ff_dim, h));
    store.add(p + "ff.b1", uniform_init(rng, 1, config.ff_dim, h));
    store.add(p + "ff.W2", uniform_init(rng, config.ff_dim, h, config.ff_dim));
    store.add(p + "ff.b2", uniform_init(rng, 1, h, config.ff_dim));
    store.add(p + "bn2.gamma", Matrix::Ones(1, h));
    store.add(p + "bn2.beta", Matrix::Zero(1, h));
  }

  const int ctx = config.context_width();
  store.add("dec.mha.Wq", uniform_init(rng, ctx, h, ctx));
  store.add("dec.mha.Wk", uniform_init(rng, h, h, h));
  store.add("dec.mha.Wv", uniform_init(rng, h, h, h));
  store.add("dec.mha.Wo", uniform_init(rng, h, h, h));
  store.add("dec.out.Wq", uniform_init(rng, h, h, h));
  store.add("dec.out.Wk", uniform_init(rng, h, h, h));
  if (config.kind == ProblemKind::kMdvrp) {
    store.add("dec.placeholder.last", uniform_init(rng, 1, h, h));
    store.add("dec.placeholder.depot", uniform_init(rng, 1, h, h));
  }
  return store;
}

QNet init_qnet(const ModelConfig& config, std::uint64_t seed) {
  QNet net{config, init_params(config, seed), {}};
  for (int l = 0; l < config.n_blocks; ++l) {
    net.stats.emplace(block_prefix(l) + "bn1", ad::BnStats::init(config.h_dim));
    net.stats.emplace(block_prefix(l) + "bn2", ad::BnStats::init(config.h_dim));
  }
  return net;
}

FeatureBatch make_feature_batch(const std::vector<StateRef>& batch) {
  if (batch.empty()) throw std::invalid_argument("make_feature_batch: empty batch");
  FeatureBatch out;
  int total = 0;
  const bool mdvrp = batch.front().instance->is_mdvrp();
  for (const StateRef& ref : batch) {
    if (ref.instance->is_mdvrp() != mdvrp)
      throw std::invalid_argument("make_feature_batch: mixed problem kinds");
    out.segments.offset.push_back(total);
    out.segments.length.push_back(ref.instance->n_nodes());
    total += ref.instance->n_nodes();
  }
  const int cols = mdvrp ? 7 : 6;
  out.features.resize(total, cols);
  out.depot_row.assign(total, 0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Instance& inst = *batch[b].instance;
    Matrix rows = dynamic_features(*batch[b].state, inst);
    rows.col(feat::kDemand) /= static_cast<double>(inst.capacity);
    const int r0 = out.segments.offset[b];
    out.features.middleRows(r0, inst.n_nodes()) = rows;
    for (int j = 0; j < inst.m(); ++j) out.depot_row[r0 + inst.n() + j] = 1;
  }
  return out;
}

NodeEmbeddings encode(ad::Tape& tape, QNet& net, const FeatureBatch& batch,
                      bool train, bool update_stats) {
  const ModelConfig& cfg = net.config;
  if (batch.features.cols() != cfg.n_node_features())
    throw std::invalid_argument(
        "encode: feature width " + std::to_string(batch.features.cols()) +
        " does not match config width " + std::to_string(cfg.n_node_features()));

  const Eigen::Index total = batch.features.rows();
  Var f = tape.constant(batch.features);
  Var h_cust = ad::linear(f, tape.leaf(net.params.at("embed.customer.W")),
                          tape.leaf(net.params.at("embed.customer.b")));
  Var h_dep = ad::linear(f, tape.leaf(net.params.at("embed.depot.W")),
                         tape.leaf(net.params.at("embed.depot.b")));

  Matrix depot_sel = Matrix::Zero(total, cfg.h_dim);
  Matrix customer_sel = Matrix::Ones(total, cfg.h_dim);
  for (Eigen::Index r = 0; r < total; ++r)
    if (batch.depot_row[static_cast<std::size_t>(r)]) {
      depot_sel.row(r).setOnes();
      customer_sel.row(r).setZero();
    }
  Var h = ad::add(ad::hadamard(h_cust, tape.constant(std::move(customer_sel))),
                  ad::hadamard(h_dep, tape.constant(std::move(depot_sel))));

  for (int l = 0; l < cfg.n_blocks; ++l) {
    const std::string p = block_prefix(l);
    ad::MhaParams mha{tape.leaf(net.params.at(p + "mha.Wq")),
                      tape.leaf(net.params.at(p + "mha.Wk")),
                      tape.leaf(net.params.at(p + "mha.Wv")),
                      tape.leaf(net.params.at(p + "mha.Wo"))};
    Var attn = ad::mha_self_segmented(h, batch.segments, cfg.n_heads, mha);
    h = ad::batch_norm(ad::add(h, attn), tape.leaf(net.params.at(p + "bn1.gamma")),
                       tape.leaf(net.params.at(p + "bn1.beta")),
                       net.stats.at(p + "bn1"), train, update_stats);
    Var ff = ad::linear(
        ad::relu(ad::linear(h, tape.leaf(net.params.at(p + "ff.W1")),
                            tape.leaf(net.params.at(p + "ff.b1")))),
        tape.leaf(net.params.at(p + "ff.W2")), tape.leaf(net.params.at(p + "ff.b2")));
    h = ad::batch_norm(ad::add(h, ff), tape.leaf(net.params.at(p + "bn2.gamma")),
                       tape.leaf(net.params.at(p + "bn2.beta")),
                       net.stats.at(p + "bn2"), train, update_stats);
  }

  return NodeEmbeddings{h, ad::segment_mean(h, batch.segments), batch.segments};
}

ad::Var build_context(ad::Tape& tape, QNet& net, const NodeEmbeddings& embeddings,
                      const std::vector<StateRef>& batch) {
  const int b_count = static_cast<int>(batch.size());
  if (embeddings.segments.count() != b_count)
    throw std::invalid_argument("build_context: batch size mismatch");

  Matrix cap(b_count, 1);
  std::vector<int> last_rows(batch.size());
  std::vector<int> depot_rows(batch.size());
  for (int b = 0; b < b_count; ++b) {
    const RoutingState& s = *batch[b].state;
    const Instance& inst = *batch[b].instance;
    cap(b, 0) = static_cast<double>(s.remaining_capacity) / inst.capacity;
    const int off = embeddings.segments.offset[b];
    last_rows[b] = s.position == kNoNode ? -1 : off + s.position;
    depot_rows[b] = s.active_depot == kNoNode ? -1 : off + s.active_depot;
  }

  std::vector<Var> parts;
  parts.push_back(embeddings.graph);
  parts.push_back(tape.constant(std::move(cap)));
  if (net.config.kind == ProblemKind::kMdvrp) {
    Var ph_last = tape.leaf(net.params.at("dec.placeholder.last"));
    Var ph_depot = tape.leaf(net.params.at("dec.placeholder.depot"));
    parts.push_back(ad::select_rows_or(embeddings.H, last_rows, ph_last));
    parts.push_back(ad::select_rows_or(embeddings.H, depot_rows, ph_depot));
  } else {
    parts.push_back(ad::select_rows(embeddings.H, last_rows));
  }
  return ad::concat_cols(parts);
}

ad::Var q_values_raw(ad::Tape& tape, QNet& net, const NodeEmbeddings& embeddings,
                     ad::Var context) {
  ad::MhaParams dec{tape.leaf(net.params.at("dec.mha.Wq")),
                    tape.leaf(net.params.at("dec.mha.Wk")),
                    tape.leaf(net.params.at("dec.mha.Wv")),
                    tape.leaf(net.params.at("dec.mha.Wo"))};
  Var c_hat = ad::mha_cross_segmented(context, embeddings.H, embeddings.segments,
                                      net.config.n_heads, dec);
  Var q_proj = ad::matmul(c_hat, tape.leaf(net.params.at("dec.out.Wq")));
  Var k_proj = ad::matmul(embeddings.H, tape.leaf(net.params.at("dec.out.Wk")));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(net.config.h_dim));
  return ad::segment_scores(q_proj, k_proj, embeddings.segments, inv_sqrt);
}

ad::Var q_values(ad::Tape& tape, QNet& net, const NodeEmbeddings& embeddings,
                 ad::Var context, const std::vector<Mask>& masks) {
  Var raw = q_values_raw(tape, net, embeddings, context);
  if (static_cast<int>(masks.size()) != raw.rows())
    throw std::invalid_argument("q_values: one mask per batch row required");
  ad::BoolMatrix mask(raw.rows(), raw.cols());
  for (Eigen::Index b = 0; b < raw.rows(); ++b) {
    const Mask& m = masks[static_cast<std::size_t>(b)];
    if (static_cast<Eigen::Index>(m.size()) != raw.cols())
      throw std::invalid_argument("q_values: mask width mismatch");
    bool any = false;
    for (Eigen::Index a = 0; a < raw.cols(); ++a) {
      mask(b, a) = m[static_cast<std::size_t>(a)] != 0;
      any = any || mask(b, a);
    }
    if (!any) throw std::invalid_argument("q_values: row " + std::to_string(b) +
                                          " has no feasible action");
  }
  return ad::apply_mask(raw, mask, ad::kNegInf);
}

ForwardResult forward(QNet& net, const Instance& instance, const RoutingState& state) {
  if (state.done) throw std::logic_error("forward: called on a terminal state");
  ad::Tape tape(false);
  const std::vector<StateRef> batch{{&instance, &state}};
  FeatureBatch fb = make_feature_batch(batch);
  NodeEmbeddings enc = encode(tape, net, fb, /*train=*/false);
  Var ctx = build_context(tape, net, enc, batch);
  Var raw = q_values_raw(tape, net, enc, ctx);

  ForwardResult out;
  out.mask = feasible_actions(state, instance);
  out.q = raw.val().row(0);
  for (int a = 0; a < instance.n_nodes(); ++a)
    if (!out.mask[static_cast<std::size_t>(a)]) out.q(a) = ad::kNegInf;
  return out;
}

Eigen::MatrixXd forward_batch(QNet& net, const std::vector<StateRef>& batch) {
  ad::Tape tape(false);
  FeatureBatch fb = make_feature_batch(batch);
  NodeEmbeddings enc = encode(tape, net, fb, /*train=*/false);
  Var ctx = build_context(tape, net, enc, batch);
  return q_values_raw(tape, net, enc, ctx).val();
}

void save_model(const std::string& path, const QNet& net, const ad::AdamState* adam) {
  save_checkpoint(path, net.params, net.stats, adam);
  nlohmann::json sidecar{{"h_dim", net.config.h_dim},
                         {"n_blocks", net.config.n_blocks},
                         {"n_heads", net.config.n_heads},
                         {"ff_dim", net.config.ff_dim},
                         {"n_node_features", net.config.n_node_features()},
                         {"problem_kind", to_string(net.config.kind)}};
  std::ofstream out(path + ".json");
  if (!out) throw std::runtime_error("save_model: cannot open " + path + ".json");
  out << sidecar.dump(2) << '\n';
}

QNet load_model(const std::string& path) {
  std::ifstream in(path + ".json");
  if (!in)
    throw std::runtime_error("load_model: missing config sidecar " + path + ".json");
  nlohmann::json sidecar;
  in >> sidecar;
  ModelConfig cfg;
  cfg.h_dim = sidecar.at("h_dim").get<int>();
  cfg.n_blocks = sidecar.at("n_blocks").get<int>();
  cfg.n_heads = sidecar.at("n_heads").get<int>();
  cfg.ff_dim = sidecar.at("ff_dim").get<int>();
  cfg.kind = problem_kind_from_string(sidecar.at("problem_kind").get<std::string>());
  cfg.validate();

  Checkpoint ckpt = load_checkpoint(path);
  // Shape-check the payload against a freshly derived layout.
  ad::ParamStore expected = init_params(cfg, 0);
  for (const auto& [name, tensor] : expected) {
    if (!ckpt.params.contains(name))
      throw std::runtime_error("load_model: checkpoint missing parameter " + name);
    const ad::Tensor& got = ckpt.params.at(name);
    if (got.value.rows() != tensor.value.rows() || got.value.cols() != tensor.value.cols())
      throw std::runtime_error("load_model: parameter " + name + " has wrong shape");
  }
  QNet net{cfg, std::move(ckpt.params), std::move(ckpt.stats)};
  for (int l = 0; l < cfg.n_blocks; ++l)
    for (const std::string bn : {"bn1", "bn2"})
      if (!net.stats.count(block_prefix(l) + bn))
        throw std::runtime_error("load_model: checkpoint missing batch norm stats");
  return net;
}

}  // namespace routeq
