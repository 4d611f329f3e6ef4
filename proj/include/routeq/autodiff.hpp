#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace routeq::ad {

using Matrix = Eigen::MatrixXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Sentinel standing in for -inf inside logits; keeps NaNs out of downstream
// arithmetic while masked softmax outputs stay exactly zero.
inline constexpr double kNegInf = -1e9;

// A dense value with an accumulated gradient. Parameters always carry a
// gradient buffer of the same shape.
struct Tensor {
  Matrix value;
  Matrix grad;

  Tensor() = default;
  explicit Tensor(Matrix v)
      : value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
};

// Named parameters, ordered by path so iteration is deterministic.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Matrix init);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  long scalar_count() const;
  void zero_grads();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

void zero_grads(ParamStore& store);

// Batch-norm running statistics, one per normalization layer.
struct BnStats {
  Matrix mean;  // 1 x C
  Matrix var;   // 1 x C

  static BnStats init(int channels) {
    return BnStats{Matrix::Zero(1, channels), Matrix::Ones(1, channels)};
  }
};

using StatStore = std::map<std::string, BnStats>;

// Row ranges partitioning a stacked matrix into per-sample blocks.
struct Segments {
  std::vector<int> offset;
  std::vector<int> length;

  int count() const { return static_cast<int>(offset.size()); }
  int total_rows() const;
  bool equal_lengths() const;

  static Segments uniform(int count, int rows_each);
};

class Tape;

// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& val() const;
  Eigen::Index rows() const { return val().rows(); }
  Eigen::Index cols() const { return val().cols(); }
  double scalar() const { return val()(0, 0); }
};

// Reverse-mode tape over dense matrices. One tape per forward/backward pass,
// confined to a single thread. Constructing with grad_enabled=false records
// values only, which is what inference paths use.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor& parameter);
  Var constant(Matrix value);

  // Accumulates d(loss)/d(p) into every reachable parameter's grad.
  // loss must be 1x1.
  void backward(Var loss);

  bool grad_enabled() const { return grad_enabled_; }
  const Matrix& value_of(int id) const { return nodes_[id].value; }
  bool node_needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  // Gradient accumulation helpers used by op backward passes.
  void accum(int id, const Matrix& g);
  void accum_block(int id, Eigen::Index row, Eigen::Index col, const Matrix& g);

  using BackFn = std::function<void(Tape&, const Matrix& upstream)>;
  Var make(Matrix value, bool needs_grad, BackFn back);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    BackFn back;
  };
  Matrix& grad_buffer(int id);
  // deque keeps value references stable while the tape grows
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
};

// ---- primitive ops ---------------------------------------------------------

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_rowvec(Var x, Var row);  // broadcasts a 1xC row over every row of x
Var relu(Var x);
Var linear(Var x, Var w, Var b);
Var concat(const std::vector<Var>& xs, int axis);  // 0 = rows, 1 = cols
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);
Var slice_rows(Var x, int row0, int rows);
Var slice_cols(Var x, int col0, int cols);
Var select_rows(Var x, const std::vector<int>& indices);
// As select_rows, but index -1 takes the (single) fallback row instead.
Var select_rows_or(Var x, const std::vector<int>& indices, Var fallback);
Var mean_over_nodes(Var x);  // column-wise mean -> 1xC
Var segment_mean(Var x, const Segments& segments);
Var sum_all(Var x);
Var gather_elements(Var x, const std::vector<std::pair<int, int>>& coords);
Var huber(Var x, double delta);

// Row-wise softmax over unmasked entries; masked outputs are exactly zero and
// receive exactly zero gradient. Throws if any row is fully masked.
Var masked_softmax(Var logits, const BoolMatrix& mask);

// Masked entries replaced by `sentinel`; their gradient is exactly zero.
Var apply_mask(Var x, const BoolMatrix& mask, double sentinel = kNegInf);

// Per-channel batch normalization over all rows. Train mode requires at
// least 2 rows and, when update_stats is set, folds the batch statistics
// into `stats` with the given momentum. Eval mode is pure.
Var batch_norm(Var x, Var gamma, Var beta, BnStats& stats, bool train,
               bool update_stats = true, double momentum = 0.1, double eps = 1e-5);

struct MhaParams {
  Var wq, wk, wv, wo;
};

// Scaled dot-product multi-head attention with output projection. The
// optional mask (queries x keys) restricts which keys each query may attend
// to. Composed from primitive ops; fine for modest sizes.
Var multi_head_attention(Var q_in, Var k_in, Var v_in, int n_heads,
                         const MhaParams& params, const BoolMatrix* attn_mask = nullptr);

// Fused block-diagonal variants used for batched forward passes: attention
// never crosses segment boundaries and only per-segment weights are stored.
Var mha_self_segmented(Var x, const Segments& segments, int n_heads, const MhaParams& params);
Var mha_cross_segmented(Var queries, Var keys_values, const Segments& segments,
                        int n_heads, const MhaParams& params);

// Row b of the result holds q_b . k_i^T * scale for every key i in segment b.
// Requires equal segment lengths.
Var segment_scores(Var q, Var k, const Segments& segments, double scale);

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  std::map<std::string, std::pair<Matrix, Matrix>> moments;  // first, second
  long t = 0;

  void ensure(const ParamStore& store);
};

void adam_step(ParamStore& store, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// ---- verification ----------------------------------------------------------

// Compares tape gradients of build_loss against central finite differences
// over every parameter element. Returns the max relative error with the
// denominator floored at 1.
double grad_check(const std::function<Var(Tape&)>& build_loss, ParamStore& params,
                  double eps);

}  // namespace routeq::ad
