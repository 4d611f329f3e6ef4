#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "routeq/autodiff.hpp"
#include "routeq/env.hpp"
#include "routeq/instance.hpp"

namespace routeq {

enum class ProblemKind { kCvrp, kMdvrp };

std::string to_string(ProblemKind kind);
ProblemKind problem_kind_from_string(const std::string& s);

struct ModelConfig {
  int h_dim = 128;
  int n_blocks = 3;
  int n_heads = 8;
  int ff_dim = 512;
  ProblemKind kind = ProblemKind::kCvrp;

  int n_node_features() const { return kind == ProblemKind::kCvrp ? 6 : 7; }
  int context_width() const { return (kind == ProblemKind::kCvrp ? 2 : 3) * h_dim + 1; }
  void validate() const;
};

struct QNet {
  ModelConfig config;
  ad::ParamStore params;
  ad::StatStore stats;
};

// Uniform init in +-1/sqrt(fan_in); customers and depots get separate input
// projections. Deterministic per seed.
ad::ParamStore init_params(const ModelConfig& config, std::uint64_t seed);
QNet init_qnet(const ModelConfig& config, std::uint64_t seed);

// One batch row per decoding state. All referenced objects must outlive the
// forward pass. Batched paths require equal node counts across the batch.
struct StateRef {
  const Instance* instance;
  const RoutingState* state;
};

struct FeatureBatch {
  ad::Matrix features;                // stacked node features, demand scaled by 1/Q
  ad::Segments segments;              // per-sample row blocks
  std::vector<std::uint8_t> depot_row;  // 1 where the row is a depot
};

FeatureBatch make_feature_batch(const std::vector<StateRef>& batch);

struct NodeEmbeddings {
  ad::Var H;       // total_nodes x h_dim
  ad::Var graph;   // batch x h_dim, per-sample mean of H
  ad::Segments segments;
};

// L attention blocks, each MHA-with-skip -> BN -> FF-with-skip -> BN.
NodeEmbeddings encode(ad::Tape& tape, QNet& net, const FeatureBatch& batch,
                      bool train, bool update_stats = true);

// [graph mean; remaining capacity / Q; last-node embedding] plus, for MDVRP,
// the active-depot embedding. Pre-first-action slots use learned placeholders.
ad::Var build_context(ad::Tape& tape, QNet& net, const NodeEmbeddings& embeddings,
                      const std::vector<StateRef>& batch);

// Context attends over all node embeddings (one cross-attention layer), then
// single-head compatibility scores per node, returned raw.
ad::Var q_values_raw(ad::Tape& tape, QNet& net, const NodeEmbeddings& embeddings,
                     ad::Var context);

// Raw scores with infeasible entries forced to the -inf sentinel. Throws if
// any row has no feasible action.
ad::Var q_values(ad::Tape& tape, QNet& net, const NodeEmbeddings& embeddings,
                 ad::Var context, const std::vector<Mask>& masks);

struct ForwardResult {
  Eigen::VectorXd q;  // per node, infeasible entries at the sentinel
  Mask mask;
};

// Full fresh pass (dynamic features flow through the encoder every call).
// Eval-mode batch norm; no gradients.
ForwardResult forward(QNet& net, const Instance& instance, const RoutingState& state);

// Raw (unmasked) Q-values for several states at once, eval mode.
Eigen::MatrixXd forward_batch(QNet& net, const std::vector<StateRef>& batch);

// Checkpoint plus a JSON sidecar (path + ".json") holding the ModelConfig.
void save_model(const std::string& path, const QNet& net,
                const ad::AdamState* adam = nullptr);
QNet load_model(const std::string& path);

}  // namespace routeq
