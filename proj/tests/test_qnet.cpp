#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "routeq/env.hpp"
#include "routeq/instance.hpp"
#include "routeq/qnet.hpp"
#include "routeq/rng.hpp"

using namespace routeq;
using ad::Matrix;

namespace {

ModelConfig tiny_config(ProblemKind kind, int h = 16, int blocks = 2, int heads = 4,
                        int ff = 32) {
  ModelConfig cfg;
  cfg.h_dim = h;
  cfg.n_blocks = blocks;
  cfg.n_heads = heads;
  cfg.ff_dim = ff;
  cfg.kind = kind;
  return cfg;
}

RoutingState random_state(const Instance& inst, int steps, std::uint64_t seed) {
  Rng rng(seed);
  RoutingState s = reset(inst);
  for (int k = 0; k < steps && !s.done; ++k) {
    const Mask mask = feasible_actions(s, inst);
    int feasible = 0;
    for (auto f : mask) feasible += f ? 1 : 0;
    int pick = static_cast<int>(rng.uniform_int(0, feasible - 1));
    for (int a = 0; a < static_cast<int>(mask.size()); ++a)
      if (mask[a] && pick-- == 0) {
        s = step(s, a, inst).state;
        break;
      }
  }
  return s;
}

// Permutes customers; depots keep their slots.
std::pair<Instance, RoutingState> permute(const Instance& inst, const RoutingState& state,
                                          const std::vector<int>& perm) {
  Instance out = inst;
  RoutingState st = state;
  std::vector<int> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = static_cast<int>(k);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    out.customers.row(static_cast<int>(k)) = inst.customers.row(perm[k]);
    out.demands(static_cast<int>(k)) = inst.demands(perm[k]);
    st.visited[k] = state.visited[perm[k]];
  }
  if (state.position != kNoNode && state.position < inst.n())
    st.position = inv[state.position];
  return {out, st};
}

}  // namespace

TEST_CASE("init_params shapes and determinism") {
  const ad::ParamStore cvrp = init_params(tiny_config(ProblemKind::kCvrp, 128, 3, 8, 512), 7);
  CHECK(cvrp.at("embed.customer.W").value.rows() == 6);
  CHECK(cvrp.at("embed.customer.W").value.cols() == 128);
  CHECK(cvrp.at("embed.depot.W").value.rows() == 6);
  CHECK(cvrp.at("embed.depot.W").value.cols() == 128);
  CHECK(cvrp.at("dec.mha.Wq").value.rows() == 2 * 128 + 1);
  CHECK_FALSE(cvrp.contains("dec.placeholder.last"));

  const ad::ParamStore mdvrp =
      init_params(tiny_config(ProblemKind::kMdvrp, 128, 3, 8, 512), 7);
  CHECK(mdvrp.at("embed.customer.W").value.rows() == 7);
  CHECK(mdvrp.at("dec.mha.Wq").value.rows() == 3 * 128 + 1);
  CHECK(mdvrp.contains("dec.placeholder.last"));
  CHECK(mdvrp.contains("dec.placeholder.depot"));

  const ad::ParamStore again =
      init_params(tiny_config(ProblemKind::kCvrp, 128, 3, 8, 512), 7);
  for (const auto& [name, tensor] : cvrp)
    CHECK(again.at(name).value == tensor.value);
}

TEST_CASE("config validation") {
  ModelConfig bad = tiny_config(ProblemKind::kCvrp, 10, 1, 4, 8);
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK(tiny_config(ProblemKind::kCvrp).context_width() == 2 * 16 + 1);
  CHECK(tiny_config(ProblemKind::kMdvrp).context_width() == 3 * 16 + 1);
}

TEST_CASE("encode with zero blocks returns the initial projections") {
  QNet net = init_qnet(tiny_config(ProblemKind::kCvrp, 16, 0), 3);
  const Instance inst = generate_instance(4, 1, 30, 5);
  const RoutingState state = reset(inst);
  ad::Tape tape(false);
  const FeatureBatch fb = make_feature_batch({{&inst, &state}});
  const NodeEmbeddings enc = encode(tape, net, fb, false);

  const Matrix& wc = net.params.at("embed.customer.W").value;
  const Matrix& bc = net.params.at("embed.customer.b").value;
  const Matrix& wd = net.params.at("embed.depot.W").value;
  const Matrix& bd = net.params.at("embed.depot.b").value;
  for (int i = 0; i < inst.n_nodes(); ++i) {
    const Eigen::RowVectorXd row = fb.features.row(i);
    const Eigen::RowVectorXd want =
        i < inst.n() ? (row * wc + bc.row(0)).eval() : (row * wd + bd.row(0)).eval();
    CHECK((enc.H.val().row(i) - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("graph embedding is the mean of node embeddings") {
  QNet net = init_qnet(tiny_config(ProblemKind::kMdvrp), 9);
  const Instance inst = generate_instance(6, 2, 30, 17);
  const RoutingState state = random_state(inst, 3, 4);
  ad::Tape tape(false);
  const FeatureBatch fb = make_feature_batch({{&inst, &state}});
  const NodeEmbeddings enc = encode(tape, net, fb, false);
  const Eigen::RowVectorXd mean = enc.H.val().colwise().mean();
  CHECK((enc.graph.val().row(0) - mean).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("feature width mismatch is rejected") {
  QNet net = init_qnet(tiny_config(ProblemKind::kMdvrp), 2);
  const Instance inst = generate_instance(4, 1, 30, 5);  // cvrp features: 6 wide
  const RoutingState state = reset(inst);
  ad::Tape tape(false);
  const FeatureBatch fb = make_feature_batch({{&inst, &state}});
  CHECK_THROWS_AS(encode(tape, net, fb, false), std::invalid_argument);
}

TEST_CASE("context: capacity slot is 1 when fresh, placeholders before first action") {
  QNet net = init_qnet(tiny_config(ProblemKind::kMdvrp, 16, 1), 21);
  const Instance inst = generate_instance(5, 2, 30, 23);
  const RoutingState state = reset(inst);
  ad::Tape tape(false);
  const FeatureBatch fb = make_feature_batch({{&inst, &state}});
  const NodeEmbeddings enc = encode(tape, net, fb, false);
  const ad::Var ctx = build_context(tape, net, enc, {{&inst, &state}});
  REQUIRE(ctx.cols() == 3 * 16 + 1);
  CHECK(ctx.val()(0, 16) == 1.0);  // capacity slot right after the graph block
  CHECK((ctx.val().block(0, 17, 1, 16) -
         net.params.at("dec.placeholder.last").value).cwiseAbs().maxCoeff() == 0.0);
  CHECK((ctx.val().block(0, 33, 1, 16) -
         net.params.at("dec.placeholder.depot").value).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("q_values mask infeasible nodes to the sentinel") {
  QNet net = init_qnet(tiny_config(ProblemKind::kCvrp), 31);
  const Instance inst = generate_instance(5, 1, 30, 37);
  RoutingState state = reset(inst);
  state = step(state, 2, inst).state;  // customer 2 now visited

  const ForwardResult fwd = forward(net, inst, state);
  CHECK(fwd.q(2) == ad::kNegInf);
  CHECK(fwd.mask[2] == 0);
  int best = 0;
  for (int a = 1; a < inst.n_nodes(); ++a)
    if (fwd.q(a) > fwd.q(best)) best = a;
  CHECK(best != 2);

  // all-feasible mask: no sentinel anywhere
  const RoutingState fresh = reset(inst);
  const ForwardResult f2 = forward(net, inst, fresh);
  for (int a = 0; a < inst.n(); ++a) CHECK(f2.q(a) > ad::kNegInf / 2);
  CHECK(f2.q(inst.n()) == ad::kNegInf);  // parked at the depot
}

TEST_CASE("duplicated node features give identical q-values") {
  QNet net = init_qnet(tiny_config(ProblemKind::kCvrp), 41);
  Instance inst = generate_instance(5, 1, 30, 43);
  inst.customers.row(3) = inst.customers.row(1);
  inst.demands(3) = inst.demands(1);
  const RoutingState state = reset(inst);
  const ForwardResult fwd = forward(net, inst, state);
  CHECK(fwd.q(1) == doctest::Approx(fwd.q(3)).epsilon(1e-12));
}

TEST_CASE("argmax is invariant to a constant shift of unmasked entries") {
  QNet net = init_qnet(tiny_config(ProblemKind::kCvrp), 47);
  const Instance inst = generate_instance(7, 1, 30, 53);
  const RoutingState state = random_state(inst, 2, 7);
  const ForwardResult fwd = forward(net, inst, state);
  Eigen::VectorXd shifted = fwd.q;
  for (int a = 0; a < inst.n_nodes(); ++a)
    if (fwd.mask[a]) shifted(a) += 123.456;
  int b1 = 0, b2 = 0;
  for (int a = 1; a < inst.n_nodes(); ++a) {
    if (fwd.q(a) > fwd.q(b1)) b1 = a;
    if (shifted(a) > shifted(b2)) b2 = a;
  }
  CHECK(b1 == b2);
}

TEST_CASE("eval-mode forward is pure") {
  QNet net = init_qnet(tiny_config(ProblemKind::kMdvrp), 59);
  const Instance inst = generate_instance(6, 2, 30, 61);
  const RoutingState state = random_state(inst, 4, 11);
  const ForwardResult a = forward(net, inst, state);
  const ForwardResult b = forward(net, inst, state);
  CHECK(a.q == b.q);
  CHECK(a.mask == b.mask);
}

TEST_CASE("permutation equivariance of q-values") {
  for (ProblemKind kind : {ProblemKind::kCvrp, ProblemKind::kMdvrp}) {
    QNet net = init_qnet(tiny_config(kind), 67);
    const int m = kind == ProblemKind::kCvrp ? 1 : 2;
    Rng rng(71);
    for (int rep = 0; rep < 10; ++rep) {
      const Instance inst = generate_instance(6, m, 30, 1000 + rep);
      const RoutingState state = random_state(inst, rep % 5, 100 + rep);
      if (state.done) continue;
      std::vector<int> perm(inst.n());
      std::iota(perm.begin(), perm.end(), 0);
      for (int i = inst.n() - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.uniform_int(0, i)]);

      const auto [pinst, pstate] = permute(inst, state, perm);
      const ForwardResult base = forward(net, inst, state);
      const ForwardResult permuted = forward(net, pinst, pstate);
      for (int k = 0; k < inst.n(); ++k)
        CHECK(permuted.q(k) == doctest::Approx(base.q(perm[k])).epsilon(1e-8));
      for (int d = 0; d < m; ++d)
        CHECK(permuted.q(inst.n() + d) ==
              doctest::Approx(base.q(inst.n() + d)).epsilon(1e-8));
    }
  }
}

TEST_CASE("dynamic features flow through the encoder") {
  QNet net = init_qnet(tiny_config(ProblemKind::kCvrp), 73);
  const Instance inst = generate_instance(6, 1, 30, 79);
  RoutingState fresh = reset(inst);
  RoutingState served = step(fresh, 0, inst).state;

  ad::Tape t1(false), t2(false);
  const FeatureBatch fb1 = make_feature_batch({{&inst, &fresh}});
  const FeatureBatch fb2 = make_feature_batch({{&inst, &served}});
  const NodeEmbeddings e1 = encode(t1, net, fb1, false);
  const NodeEmbeddings e2 = encode(t2, net, fb2, false);
  CHECK((e1.H.val() - e2.H.val()).norm() > 0.0);

  // flipping any visited bit changes some q-value
  for (int i = 0; i < inst.n(); ++i) {
    RoutingState flipped = fresh;
    flipped.visited[i] = 1;
    flipped.visited_count = 1;
    const ForwardResult a = forward(net, inst, fresh);
    const ForwardResult b = forward(net, inst, flipped);
    double diff = 0.0;
    for (int n = 0; n < inst.n_nodes(); ++n)
      if (a.mask[n] && b.mask[n]) diff = std::max(diff, std::abs(a.q(n) - b.q(n)));
    CHECK(diff > 0.0);
  }
}

TEST_CASE("batched forward equals single forwards") {
  for (ProblemKind kind : {ProblemKind::kCvrp, ProblemKind::kMdvrp}) {
    QNet net = init_qnet(tiny_config(kind), 83);
    const int m = kind == ProblemKind::kCvrp ? 1 : 3;
    std::vector<Instance> instances;
    std::vector<RoutingState> states;
    for (int k = 0; k < 5; ++k) {
      instances.push_back(generate_instance(6, m, 30, 2000 + k));
      states.push_back(random_state(instances.back(), k, 300 + k));
    }
    std::vector<StateRef> refs;
    for (int k = 0; k < 5; ++k) refs.push_back({&instances[k], &states[k]});
    const Eigen::MatrixXd batched = forward_batch(net, refs);
    for (int k = 0; k < 5; ++k) {
      ad::Tape tape(false);
      const std::vector<StateRef> single{refs[static_cast<std::size_t>(k)]};
      const FeatureBatch fb = make_feature_batch(single);
      const NodeEmbeddings enc = encode(tape, net, fb, false);
      const ad::Var ctx = build_context(tape, net, enc, single);
      const Eigen::RowVectorXd row = q_values_raw(tape, net, enc, ctx).val().row(0);
      CHECK((batched.row(k) - row).cwiseAbs().maxCoeff() < 1e-9);
    }
  }
}

TEST_CASE("terminal-adjacent state offers exactly the last customer") {
  QNet net = init_qnet(tiny_config(ProblemKind::kCvrp), 89);
  const Instance inst = generate_instance(3, 1, 30, 97);
  RoutingState s = reset(inst);
  s = step(s, 0, inst).state;
  s = step(s, 1, inst).state;
  const ForwardResult fwd = forward(net, inst, s);
  CHECK(fwd.mask == Mask{0, 0, 1, 1});  // remaining customer + depot
}

TEST_CASE("end-to-end gradient check on the tiny network") {
  for (ProblemKind kind : {ProblemKind::kCvrp, ProblemKind::kMdvrp}) {
    const int m = kind == ProblemKind::kCvrp ? 1 : 2;
    QNet net = init_qnet(tiny_config(kind, 8, 1, 2, 16), 101);
    const Instance inst = generate_instance(4, m, 30, 103);
    const RoutingState state = random_state(inst, 2, 17);
    if (state.done) continue;
    const Mask mask = feasible_actions(state, inst);

    const double err = ad::grad_check(
        [&](ad::Tape& tape) {
          const std::vector<StateRef> batch{{&inst, &state}};
          const FeatureBatch fb = make_feature_batch(batch);
          const NodeEmbeddings enc = encode(tape, net, fb, /*train=*/true,
                                            /*update_stats=*/false);
          const ad::Var ctx = build_context(tape, net, enc, batch);
          const ad::Var q = q_values(tape, net, enc, ctx, {mask});
          std::vector<std::pair<int, int>> coords;
          for (int a = 0; a < inst.n_nodes(); ++a)
            if (mask[a]) coords.emplace_back(0, a);
          return ad::sum_all(ad::gather_elements(q, coords));
        },
        net.params, 1e-4);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("model save/load round-trip preserves behavior") {
  QNet net = init_qnet(tiny_config(ProblemKind::kMdvrp, 16, 2), 107);
  // make running stats non-trivial so the round-trip is meaningful
  net.stats.at("enc.l0.bn1").mean.setConstant(0.25);
  net.stats.at("enc.l0.bn1").var.setConstant(1.5);
  const Instance inst = generate_instance(5, 2, 30, 109);
  const RoutingState state = random_state(inst, 3, 23);
  const ForwardResult before = forward(net, inst, state);

  const auto path = (std::filesystem::temp_directory_path() / "routeq_model.ckpt").string();
  save_model(path, net);
  QNet loaded = load_model(path);
  CHECK(loaded.config.h_dim == 16);
  CHECK(loaded.config.kind == ProblemKind::kMdvrp);
  const ForwardResult after = forward(loaded, inst, state);
  CHECK(before.q == after.q);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".json");
}
