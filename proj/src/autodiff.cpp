#include "routeq/autodiff.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace routeq::ad {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream s;
  s << m.rows() << "x" << m.cols();
  return s.str();
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("ops require vars from the same tape");
}

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

bool any_needs(std::initializer_list<Var> vars) {
  for (Var v : vars)
    if (v.tape->node_needs_grad(v.id)) return true;
  return false;
}

}  // namespace

// ---- ParamStore -------------------------------------------------------------

Tensor& ParamStore::add(const std::string& name, Matrix init) {
  auto [it, inserted] = params_.emplace(name, Tensor(std::move(init)));
  if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
  return it->second;
}

long ParamStore::scalar_count() const {
  long count = 0;
  for (const auto& [name, t] : params_) count += static_cast<long>(t.value.size());
  return count;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) t.zero_grad();
}

void zero_grads(ParamStore& store) { store.zero_grads(); }

// ---- Segments ---------------------------------------------------------------

int Segments::total_rows() const {
  int total = 0;
  for (int len : length) total += len;
  return total;
}

bool Segments::equal_lengths() const {
  for (int len : length)
    if (len != length.front()) return false;
  return true;
}

Segments Segments::uniform(int count, int rows_each) {
  Segments s;
  s.offset.resize(count);
  s.length.assign(count, rows_each);
  for (int i = 0; i < count; ++i) s.offset[i] = i * rows_each;
  return s;
}

// ---- Tape -------------------------------------------------------------------

const Matrix& Var::val() const { return tape->value_of(id); }

Var Tape::make(Matrix value, bool needs_grad, BackFn back) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = grad_enabled_ && needs_grad;
  if (node.needs_grad) node.back = std::move(back);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor& parameter) {
  Tensor* p = &parameter;
  return make(parameter.value, /*needs_grad=*/true,
              [p](Tape&, const Matrix& g) { p->grad += g; });
}

Var Tape::constant(Matrix value) { return make(std::move(value), false, nullptr); }

Matrix& Tape::grad_buffer(int id) {
  Node& node = nodes_[id];
  if (node.grad.size() == 0)
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

void Tape::accum(int id, const Matrix& g) {
  if (!nodes_[id].needs_grad) return;
  grad_buffer(id) += g;
}

void Tape::accum_block(int id, Eigen::Index row, Eigen::Index col, const Matrix& g) {
  if (!nodes_[id].needs_grad) return;
  grad_buffer(id).block(row, col, g.rows(), g.cols()) += g;
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw std::logic_error("backward: tape was built without gradients");
  if (loss.tape != this) throw std::invalid_argument("backward: loss from another tape");
  const Matrix& lv = nodes_[loss.id].value;
  if (lv.rows() != 1 || lv.cols() != 1)
    throw std::invalid_argument("backward: loss must be a 1x1 scalar, got " + shape_str(lv));
  for (Node& node : nodes_) node.grad.resize(0, 0);
  grad_buffer(loss.id).setConstant(1.0);
  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (!node.needs_grad || node.grad.size() == 0 || !node.back) continue;
    node.back(*this, node.grad);
  }
}

// ---- primitive ops ----------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) shape_error("matmul", a.val(), b.val());
  Matrix out = a.val() * b.val();
  const int aid = a.id, bid = b.id;
  return a.tape->make(std::move(out), any_needs({a, b}),
                      [aid, bid](Tape& t, const Matrix& g) {
                        t.accum(aid, g * t.value_of(bid).transpose());
                        t.accum(bid, t.value_of(aid).transpose() * g);
                      });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  if (a.cols() != b.cols()) shape_error("matmul_nt", a.val(), b.val());
  Matrix out = a.val() * b.val().transpose();
  const int aid = a.id, bid = b.id;
  return a.tape->make(std::move(out), any_needs({a, b}),
                      [aid, bid](Tape& t, const Matrix& g) {
                        t.accum(aid, g * t.value_of(bid));
                        t.accum(bid, g.transpose() * t.value_of(aid));
                      });
}

Var transpose(Var a) {
  const int aid = a.id;
  return a.tape->make(a.val().transpose(), any_needs({a}),
                      [aid](Tape& t, const Matrix& g) { t.accum(aid, g.transpose()); });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("add", a.val(), b.val());
  const int aid = a.id, bid = b.id;
  return a.tape->make(a.val() + b.val(), any_needs({a, b}),
                      [aid, bid](Tape& t, const Matrix& g) {
                        t.accum(aid, g);
                        t.accum(bid, g);
                      });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("sub", a.val(), b.val());
  const int aid = a.id, bid = b.id;
  return a.tape->make(a.val() - b.val(), any_needs({a, b}),
                      [aid, bid](Tape& t, const Matrix& g) {
                        t.accum(aid, g);
                        t.accum(bid, -g);
                      });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error("hadamard", a.val(), b.val());
  const int aid = a.id, bid = b.id;
  return a.tape->make(a.val().cwiseProduct(b.val()), any_needs({a, b}),
                      [aid, bid](Tape& t, const Matrix& g) {
                        t.accum(aid, g.cwiseProduct(t.value_of(bid)));
                        t.accum(bid, g.cwiseProduct(t.value_of(aid)));
                      });
}

Var scale(Var a, double s) {
  const int aid = a.id;
  return a.tape->make(a.val() * s, any_needs({a}),
                      [aid, s](Tape& t, const Matrix& g) { t.accum(aid, g * s); });
}

Var add_rowvec(Var x, Var row) {
  require_same_tape(x, row);
  if (row.rows() != 1 || row.cols() != x.cols()) shape_error("add_rowvec", x.val(), row.val());
  Matrix out = x.val();
  out.rowwise() += Eigen::RowVectorXd(row.val().row(0));
  const int xid = x.id, rid = row.id;
  return x.tape->make(std::move(out), any_needs({x, row}),
                      [xid, rid](Tape& t, const Matrix& g) {
                        t.accum(xid, g);
                        t.accum(rid, g.colwise().sum());
                      });
}

Var relu(Var x) {
  const int xid = x.id;
  return x.tape->make(x.val().cwiseMax(0.0), any_needs({x}),
                      [xid](Tape& t, const Matrix& g) {
                        const Matrix& v = t.value_of(xid);
                        Matrix dx =
                            (v.array() > 0.0).select(g, Matrix::Zero(g.rows(), g.cols()));
                        t.accum(xid, dx);
                      });
}

Var linear(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  Eigen::Index rows = 0;
  const Eigen::Index cols = xs.front().cols();
  bool needs = false;
  for (Var v : xs) {
    if (v.cols() != cols) shape_error("concat_rows", xs.front().val(), v.val());
    rows += v.rows();
    needs = needs || v.tape->node_needs_grad(v.id);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  std::vector<std::pair<int, Eigen::Index>> pieces;
  for (Var v : xs) {
    out.middleRows(at, v.rows()) = v.val();
    pieces.emplace_back(v.id, v.rows());
    at += v.rows();
  }
  return xs.front().tape->make(std::move(out), needs,
                               [pieces](Tape& t, const Matrix& g) {
                                 Eigen::Index at = 0;
                                 for (auto [id, n] : pieces) {
                                   t.accum(id, g.middleRows(at, n));
                                   at += n;
                                 }
                               });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  Eigen::Index cols = 0;
  const Eigen::Index rows = xs.front().rows();
  bool needs = false;
  for (Var v : xs) {
    if (v.rows() != rows) shape_error("concat_cols", xs.front().val(), v.val());
    cols += v.cols();
    needs = needs || v.tape->node_needs_grad(v.id);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  std::vector<std::pair<int, Eigen::Index>> pieces;
  for (Var v : xs) {
    out.middleCols(at, v.cols()) = v.val();
    pieces.emplace_back(v.id, v.cols());
    at += v.cols();
  }
  return xs.front().tape->make(std::move(out), needs,
                               [pieces](Tape& t, const Matrix& g) {
                                 Eigen::Index at = 0;
                                 for (auto [id, n] : pieces) {
                                   t.accum(id, g.middleCols(at, n));
                                   at += n;
                                 }
                               });
}

Var concat(const std::vector<Var>& xs, int axis) {
  if (axis == 0) return concat_rows(xs);
  if (axis == 1) return concat_cols(xs);
  throw std::invalid_argument("concat: axis must be 0 or 1");
}

Var slice_rows(Var x, int row0, int rows) {
  if (row0 < 0 || rows < 0 || row0 + rows > x.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  const int xid = x.id;
  return x.tape->make(x.val().middleRows(row0, rows), any_needs({x}),
                      [xid, row0](Tape& t, const Matrix& g) {
                        t.accum_block(xid, row0, 0, g);
                      });
}

Var slice_cols(Var x, int col0, int cols) {
  if (col0 < 0 || cols < 0 || col0 + cols > x.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  const int xid = x.id;
  return x.tape->make(x.val().middleCols(col0, cols), any_needs({x}),
                      [xid, col0](Tape& t, const Matrix& g) {
                        t.accum_block(xid, 0, col0, g);
                      });
}

Var select_rows(Var x, const std::vector<int>& indices) {
  Matrix out(static_cast<Eigen::Index>(indices.size()), x.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= x.rows())
      throw std::invalid_argument("select_rows: index out of bounds");
    out.row(static_cast<Eigen::Index>(k)) = x.val().row(indices[k]);
  }
  const int xid = x.id;
  auto idx = indices;
  return x.tape->make(std::move(out), any_needs({x}),
                      [xid, idx](Tape& t, const Matrix& g) {
                        for (std::size_t k = 0; k < idx.size(); ++k)
                          t.accum_block(xid, idx[k], 0,
                                        Matrix(g.row(static_cast<Eigen::Index>(k))));
                      });
}

Var select_rows_or(Var x, const std::vector<int>& indices, Var fallback) {
  require_same_tape(x, fallback);
  if (fallback.rows() != 1 || fallback.cols() != x.cols())
    shape_error("select_rows_or", x.val(), fallback.val());
  Matrix out(static_cast<Eigen::Index>(indices.size()), x.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= x.rows())
      throw std::invalid_argument("select_rows_or: index out of bounds");
    out.row(static_cast<Eigen::Index>(k)) =
        indices[k] < 0 ? fallback.val().row(0) : x.val().row(indices[k]);
  }
  const int xid = x.id, fid = fallback.id;
  auto idx = indices;
  return x.tape->make(std::move(out), any_needs({x, fallback}),
                      [xid, fid, idx](Tape& t, const Matrix& g) {
                        for (std::size_t k = 0; k < idx.size(); ++k) {
                          Matrix row = g.row(static_cast<Eigen::Index>(k));
                          if (idx[k] < 0)
                            t.accum_block(fid, 0, 0, row);
                          else
                            t.accum_block(xid, idx[k], 0, row);
                        }
                      });
}

Var mean_over_nodes(Var x) {
  if (x.rows() < 1) throw std::invalid_argument("mean_over_nodes: empty input");
  const double inv = 1.0 / static_cast<double>(x.rows());
  const int xid = x.id;
  const Eigen::Index rows = x.rows();
  return x.tape->make(x.val().colwise().mean(), any_needs({x}),
                      [xid, inv, rows](Tape& t, const Matrix& g) {
                        t.accum(xid, Matrix((g * inv).replicate(rows, 1)));
                      });
}

Var segment_mean(Var x, const Segments& segments) {
  if (segments.total_rows() != x.rows())
    throw std::invalid_argument("segment_mean: segments do not cover the matrix");
  Matrix out(segments.count(), x.cols());
  for (int b = 0; b < segments.count(); ++b)
    out.row(b) = x.val().middleRows(segments.offset[b], segments.length[b]).colwise().mean();
  const int xid = x.id;
  Segments segs = segments;
  return x.tape->make(std::move(out), any_needs({x}),
                      [xid, segs](Tape& t, const Matrix& g) {
                        for (int b = 0; b < segs.count(); ++b) {
                          const double inv = 1.0 / segs.length[b];
                          t.accum_block(xid, segs.offset[b], 0,
                                        Matrix((g.row(b) * inv).replicate(segs.length[b], 1)));
                        }
                      });
}

Var sum_all(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.val().sum();
  const int xid = x.id;
  const Eigen::Index rows = x.rows(), cols = x.cols();
  return x.tape->make(std::move(out), any_needs({x}),
                      [xid, rows, cols](Tape& t, const Matrix& g) {
                        t.accum(xid, Matrix::Constant(rows, cols, g(0, 0)));
                      });
}

Var gather_elements(Var x, const std::vector<std::pair<int, int>>& coords) {
  Matrix out(static_cast<Eigen::Index>(coords.size()), 1);
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto [r, c] = coords[k];
    if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols())
      throw std::invalid_argument("gather_elements: coordinate out of bounds");
    out(static_cast<Eigen::Index>(k), 0) = x.val()(r, c);
  }
  const int xid = x.id;
  auto rc = coords;
  return x.tape->make(std::move(out), any_needs({x}),
                      [xid, rc](Tape& t, const Matrix& g) {
                        Matrix cell(1, 1);
                        for (std::size_t k = 0; k < rc.size(); ++k) {
                          cell(0, 0) = g(static_cast<Eigen::Index>(k), 0);
                          t.accum_block(xid, rc[k].first, rc[k].second, cell);
                        }
                      });
}

Var huber(Var x, double delta) {
  Matrix out = x.val().unaryExpr([delta](double v) {
    const double a = std::abs(v);
    return a <= delta ? 0.5 * v * v : delta * (a - 0.5 * delta);
  });
  const int xid = x.id;
  return x.tape->make(std::move(out), any_needs({x}),
                      [xid, delta](Tape& t, const Matrix& g) {
                        const Matrix& v = t.value_of(xid);
                        t.accum(xid, g.cwiseProduct(v.cwiseMax(-delta).cwiseMin(delta)));
                      });
}

Var masked_softmax(Var logits, const BoolMatrix& mask) {
  const Matrix& v = logits.val();
  if (mask.rows() != v.rows() || mask.cols() != v.cols())
    throw std::invalid_argument("masked_softmax: mask shape does not match logits " +
                                shape_str(v));
  Matrix out = Matrix::Zero(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < v.cols(); ++c)
      if (mask(r, c)) best = std::max(best, v(r, c));
    if (!std::isfinite(best))
      throw std::invalid_argument("masked_softmax: row " + std::to_string(r) +
                                  " is fully masked");
    double total = 0.0;
    for (Eigen::Index c = 0; c < v.cols(); ++c)
      if (mask(r, c)) {
        out(r, c) = std::exp(v(r, c) - best);
        total += out(r, c);
      }
    for (Eigen::Index c = 0; c < v.cols(); ++c)
      if (mask(r, c)) out(r, c) /= total;
  }
  const int lid = logits.id;
  // Masked probabilities are exactly zero, which makes their gradient
  // contribution exactly zero as well.
  auto probs = std::make_shared<Matrix>(out);
  return logits.tape->make(std::move(out), any_needs({logits}),
                           [lid, probs](Tape& t, const Matrix& g) {
                             const Matrix& s = *probs;
                             Eigen::VectorXd dot = g.cwiseProduct(s).rowwise().sum();
                             Matrix shifted = g;
                             shifted.colwise() -= dot;
                             t.accum(lid, s.cwiseProduct(shifted));
                           });
}

Var apply_mask(Var x, const BoolMatrix& mask, double sentinel) {
  const Matrix& v = x.val();
  if (mask.rows() != v.rows() || mask.cols() != v.cols())
    throw std::invalid_argument("apply_mask: mask does not match " + shape_str(v));
  Matrix out =
      mask.array().select(v, Matrix::Constant(v.rows(), v.cols(), sentinel));
  const int xid = x.id;
  BoolMatrix m = mask;
  return x.tape->make(std::move(out), any_needs({x}),
                      [xid, m](Tape& t, const Matrix& g) {
                        Matrix dx = m.array().select(g, Matrix::Zero(g.rows(), g.cols()));
                        t.accum(xid, dx);
                      });
}

Var batch_norm(Var x, Var gamma, Var beta, BnStats& stats, bool train,
               bool update_stats, double momentum, double eps) {
  require_same_tape(x, gamma);
  require_same_tape(x, beta);
  const Matrix& v = x.val();
  const Eigen::Index rows = v.rows(), cols = v.cols();
  if (gamma.cols() != cols || beta.cols() != cols || gamma.rows() != 1 || beta.rows() != 1)
    throw std::invalid_argument("batch_norm: gamma/beta must be 1x" + std::to_string(cols));
  const int xid = x.id, gid = gamma.id, bid = beta.id;

  if (train) {
    if (rows < 2) throw std::invalid_argument("batch_norm: train mode needs >= 2 rows");
    Eigen::RowVectorXd mu = v.colwise().mean();
    Matrix centered = v.rowwise() - mu;
    Eigen::RowVectorXd var_b = centered.cwiseProduct(centered).colwise().mean();
    Eigen::RowVectorXd inv_std = (var_b.array() + eps).rsqrt().matrix();
    Matrix xhat = centered;
    xhat.array().rowwise() *= inv_std.array();
    Matrix out = xhat;
    out.array().rowwise() *= Eigen::RowVectorXd(gamma.val().row(0)).array();
    out.rowwise() += Eigen::RowVectorXd(beta.val().row(0));
    if (update_stats) {
      const double unbias =
          rows > 1 ? static_cast<double>(rows) / static_cast<double>(rows - 1) : 1.0;
      stats.mean = (1.0 - momentum) * stats.mean + momentum * mu;
      stats.var = (1.0 - momentum) * stats.var + momentum * (var_b * unbias);
    }
    auto cache =
        std::make_shared<std::pair<Matrix, Eigen::RowVectorXd>>(std::move(xhat), inv_std);
    return x.tape->make(std::move(out), any_needs({x, gamma, beta}),
                        [xid, gid, bid, cache](Tape& t, const Matrix& g) {
                          const Matrix& xh = cache->first;
                          const Eigen::RowVectorXd& istd = cache->second;
                          t.accum(gid, g.cwiseProduct(xh).colwise().sum());
                          t.accum(bid, g.colwise().sum());
                          Matrix dxhat = g;
                          dxhat.array().rowwise() *=
                              Eigen::RowVectorXd(t.value_of(gid).row(0)).array();
                          Eigen::RowVectorXd m1 = dxhat.colwise().mean();
                          Eigen::RowVectorXd m2 =
                              dxhat.cwiseProduct(xh).colwise().mean();
                          Matrix dx = dxhat;
                          dx.rowwise() -= m1;
                          Matrix proj = xh;
                          proj.array().rowwise() *= m2.array();
                          dx -= proj;
                          dx.array().rowwise() *= istd.array();
                          t.accum(xid, dx);
                        });
  }

  Eigen::RowVectorXd run_mean = stats.mean.row(0);
  Eigen::RowVectorXd inv_std = (stats.var.row(0).array() + eps).rsqrt().matrix();
  Matrix xhat = v.rowwise() - run_mean;
  xhat.array().rowwise() *= inv_std.array();
  Matrix out = xhat;
  out.array().rowwise() *= Eigen::RowVectorXd(gamma.val().row(0)).array();
  out.rowwise() += Eigen::RowVectorXd(beta.val().row(0));
  auto cache =
      std::make_shared<std::pair<Matrix, Eigen::RowVectorXd>>(std::move(xhat), inv_std);
  return x.tape->make(std::move(out), any_needs({x, gamma, beta}),
                      [xid, gid, bid, cache](Tape& t, const Matrix& g) {
                        const Matrix& xh = cache->first;
                        const Eigen::RowVectorXd& istd = cache->second;
                        t.accum(gid, g.cwiseProduct(xh).colwise().sum());
                        t.accum(bid, g.colwise().sum());
                        Matrix dx = g;
                        Eigen::RowVectorXd coef =
                            Eigen::RowVectorXd(t.value_of(gid).row(0)).cwiseProduct(istd);
                        dx.array().rowwise() *= coef.array();
                        t.accum(xid, dx);
                      });
}

// ---- attention --------------------------------------------------------------

Var multi_head_attention(Var q_in, Var k_in, Var v_in, int n_heads,
                         const MhaParams& params, const BoolMatrix* attn_mask) {
  const Eigen::Index h = params.wq.cols();
  if (n_heads < 1 || h % n_heads != 0)
    throw std::invalid_argument("multi_head_attention: model dim " + std::to_string(h) +
                                " not divisible by " + std::to_string(n_heads) + " heads");
  if (params.wk.cols() != h || params.wv.cols() != h)
    throw std::invalid_argument("multi_head_attention: projection widths disagree");
  Var qp = matmul(q_in, params.wq);
  Var kp = matmul(k_in, params.wk);
  Var vp = matmul(v_in, params.wv);
  const int dh = static_cast<int>(h) / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const BoolMatrix mask =
      attn_mask ? *attn_mask : BoolMatrix::Constant(q_in.rows(), k_in.rows(), true);
  std::vector<Var> heads;
  heads.reserve(n_heads);
  for (int a = 0; a < n_heads; ++a) {
    Var qh = slice_cols(qp, a * dh, dh);
    Var kh = slice_cols(kp, a * dh, dh);
    Var vh = slice_cols(vp, a * dh, dh);
    Var attn = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask);
    heads.push_back(matmul(attn, vh));
  }
  return matmul(concat_cols(heads), params.wo);
}

namespace {

struct SegmentedAttentionCache {
  Matrix qp, kp, vp, heads_out;
  std::vector<Matrix> attn;  // one block per (segment, head)
};

}  // namespace

Var mha_self_segmented(Var x, const Segments& segments, int n_heads, const MhaParams& params) {
  const Eigen::Index h = params.wq.cols();
  if (n_heads < 1 || h % n_heads != 0)
    throw std::invalid_argument("mha_self_segmented: model dim not divisible by heads");
  if (segments.total_rows() != x.rows())
    throw std::invalid_argument("mha_self_segmented: segments do not cover the matrix");
  const int dh = static_cast<int>(h) / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto cache = std::make_shared<SegmentedAttentionCache>();
  cache->qp = x.val() * params.wq.val();
  cache->kp = x.val() * params.wk.val();
  cache->vp = x.val() * params.wv.val();
  cache->heads_out = Matrix::Zero(x.rows(), h);
  cache->attn.reserve(static_cast<std::size_t>(segments.count()) * n_heads);

  for (int b = 0; b < segments.count(); ++b) {
    const int r0 = segments.offset[b], len = segments.length[b];
    for (int a = 0; a < n_heads; ++a) {
      const int c0 = a * dh;
      // lazyProduct keeps these tiny per-segment products on the
      // coefficient path instead of the gemm dispatcher
      Matrix scores(len, len);
      scores.noalias() = cache->qp.block(r0, c0, len, dh).lazyProduct(
          cache->kp.block(r0, c0, len, dh).transpose());
      scores *= inv_sqrt;
      Eigen::VectorXd mx = scores.rowwise().maxCoeff();
      scores.colwise() -= mx;
      scores = scores.array().exp().matrix();
      Eigen::VectorXd denom = scores.rowwise().sum();
      scores.array().colwise() /= denom.array();
      cache->heads_out.block(r0, c0, len, dh).noalias() =
          scores.lazyProduct(cache->vp.block(r0, c0, len, dh));
      cache->attn.push_back(std::move(scores));
    }
  }

  Matrix out = cache->heads_out * params.wo.val();
  const int xid = x.id;
  const int wq_id = params.wq.id, wk_id = params.wk.id, wv_id = params.wv.id,
            wo_id = params.wo.id;
  Segments segs = segments;
  const bool needs = any_needs({x, params.wq, params.wk, params.wv, params.wo});
  return x.tape->make(
      std::move(out), needs,
      [xid, wq_id, wk_id, wv_id, wo_id, segs, n_heads, dh, inv_sqrt, cache](
          Tape& t, const Matrix& g) {
        t.accum(wo_id, cache->heads_out.transpose() * g);
        Matrix d_heads = g * t.value_of(wo_id).transpose();
        Matrix dqp = Matrix::Zero(cache->qp.rows(), cache->qp.cols());
        Matrix dkp = Matrix::Zero(dqp.rows(), dqp.cols());
        Matrix dvp = Matrix::Zero(dqp.rows(), dqp.cols());
        std::size_t blk = 0;
        for (int b = 0; b < segs.count(); ++b) {
          const int r0 = segs.offset[b], len = segs.length[b];
          for (int a = 0; a < n_heads; ++a, ++blk) {
            const int c0 = a * dh;
            const Matrix& attn = cache->attn[blk];
            const Matrix d_out = d_heads.block(r0, c0, len, dh);
            Matrix d_attn(len, len);
            d_attn.noalias() =
                d_out.lazyProduct(cache->vp.block(r0, c0, len, dh).transpose());
            dvp.block(r0, c0, len, dh).noalias() += attn.transpose().lazyProduct(d_out);
            Eigen::VectorXd dot = d_attn.cwiseProduct(attn).rowwise().sum();
            Matrix shifted = d_attn;
            shifted.colwise() -= dot;
            Matrix d_scores = attn.cwiseProduct(shifted) * inv_sqrt;
            dqp.block(r0, c0, len, dh).noalias() +=
                d_scores.lazyProduct(cache->kp.block(r0, c0, len, dh));
            dkp.block(r0, c0, len, dh).noalias() +=
                d_scores.transpose().lazyProduct(cache->qp.block(r0, c0, len, dh));
          }
        }
        const Matrix& xv = t.value_of(xid);
        t.accum(wq_id, xv.transpose() * dqp);
        t.accum(wk_id, xv.transpose() * dkp);
        t.accum(wv_id, xv.transpose() * dvp);
        if (t.node_needs_grad(xid))
          t.accum(xid, dqp * t.value_of(wq_id).transpose() +
                           dkp * t.value_of(wk_id).transpose() +
                           dvp * t.value_of(wv_id).transpose());
      });
}

Var mha_cross_segmented(Var queries, Var keys_values, const Segments& segments,
                        int n_heads, const MhaParams& params) {
  require_same_tape(queries, keys_values);
  const Eigen::Index h = params.wk.cols();
  if (n_heads < 1 || h % n_heads != 0)
    throw std::invalid_argument("mha_cross_segmented: model dim not divisible by heads");
  if (segments.count() != queries.rows())
    throw std::invalid_argument("mha_cross_segmented: one segment per query row required");
  if (segments.total_rows() != keys_values.rows())
    throw std::invalid_argument("mha_cross_segmented: segments do not cover keys");
  const int dh = static_cast<int>(h) / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto cache = std::make_shared<SegmentedAttentionCache>();
  cache->qp = queries.val() * params.wq.val();  // B x h
  cache->kp = keys_values.val() * params.wk.val();
  cache->vp = keys_values.val() * params.wv.val();
  const int batch = segments.count();
  cache->heads_out = Matrix::Zero(batch, h);
  cache->attn.reserve(static_cast<std::size_t>(batch) * n_heads);

  for (int b = 0; b < batch; ++b) {
    const int r0 = segments.offset[b], len = segments.length[b];
    for (int a = 0; a < n_heads; ++a) {
      const int c0 = a * dh;
      Matrix scores(1, len);
      scores.noalias() = cache->qp.block(b, c0, 1, dh).lazyProduct(
          cache->kp.block(r0, c0, len, dh).transpose());
      scores *= inv_sqrt;
      const double mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp().matrix();
      scores /= scores.sum();
      cache->heads_out.block(b, c0, 1, dh).noalias() =
          scores.lazyProduct(cache->vp.block(r0, c0, len, dh));
      cache->attn.push_back(std::move(scores));
    }
  }

  Matrix out = cache->heads_out * params.wo.val();
  const int qid = queries.id, kid = keys_values.id;
  const int wq_id = params.wq.id, wk_id = params.wk.id, wv_id = params.wv.id,
            wo_id = params.wo.id;
  Segments segs = segments;
  const bool needs =
      any_needs({queries, keys_values, params.wq, params.wk, params.wv, params.wo});
  return queries.tape->make(
      std::move(out), needs,
      [qid, kid, wq_id, wk_id, wv_id, wo_id, segs, n_heads, dh, inv_sqrt, cache](
          Tape& t, const Matrix& g) {
        t.accum(wo_id, cache->heads_out.transpose() * g);
        Matrix d_heads = g * t.value_of(wo_id).transpose();
        Matrix dqp = Matrix::Zero(cache->qp.rows(), cache->qp.cols());
        Matrix dkp = Matrix::Zero(cache->kp.rows(), cache->kp.cols());
        Matrix dvp = Matrix::Zero(cache->vp.rows(), cache->vp.cols());
        std::size_t blk = 0;
        for (int b = 0; b < segs.count(); ++b) {
          const int r0 = segs.offset[b], len = segs.length[b];
          for (int a = 0; a < n_heads; ++a, ++blk) {
            const int c0 = a * dh;
            const Matrix& attn = cache->attn[blk];  // 1 x len
            const Matrix d_out = d_heads.block(b, c0, 1, dh);
            Matrix d_attn(1, len);
            d_attn.noalias() =
                d_out.lazyProduct(cache->vp.block(r0, c0, len, dh).transpose());
            dvp.block(r0, c0, len, dh).noalias() += attn.transpose().lazyProduct(d_out);
            const double dot = d_attn.cwiseProduct(attn).sum();
            Matrix shifted = (d_attn.array() - dot).matrix();
            Matrix d_scores = attn.cwiseProduct(shifted) * inv_sqrt;
            dqp.block(b, c0, 1, dh).noalias() +=
                d_scores.lazyProduct(cache->kp.block(r0, c0, len, dh));
            dkp.block(r0, c0, len, dh).noalias() +=
                d_scores.transpose().lazyProduct(cache->qp.block(b, c0, 1, dh));
          }
        }
        t.accum(wq_id, t.value_of(qid).transpose() * dqp);
        t.accum(wk_id, t.value_of(kid).transpose() * dkp);
        t.accum(wv_id, t.value_of(kid).transpose() * dvp);
        if (t.node_needs_grad(qid)) t.accum(qid, dqp * t.value_of(wq_id).transpose());
        if (t.node_needs_grad(kid))
          t.accum(kid, dkp * t.value_of(wk_id).transpose() +
                           dvp * t.value_of(wv_id).transpose());
      });
}

Var segment_scores(Var q, Var k, const Segments& segments, double scale_factor) {
  require_same_tape(q, k);
  if (segments.count() == 0 || !segments.equal_lengths())
    throw std::invalid_argument("segment_scores: segments must be non-empty with equal lengths");
  if (segments.count() != q.rows())
    throw std::invalid_argument("segment_scores: one segment per query row required");
  if (segments.total_rows() != k.rows())
    throw std::invalid_argument("segment_scores: segments do not cover keys");
  if (q.cols() != k.cols()) shape_error("segment_scores", q.val(), k.val());
  const int len = segments.length.front();
  Matrix out(segments.count(), len);
  for (int b = 0; b < segments.count(); ++b)
    out.row(b).noalias() =
        q.val().row(b).lazyProduct(
            k.val().middleRows(segments.offset[b], len).transpose()) *
        scale_factor;
  const int qid = q.id, kid = k.id;
  Segments segs = segments;
  return q.tape->make(std::move(out), any_needs({q, k}),
                      [qid, kid, segs, len, scale_factor](Tape& t, const Matrix& g) {
                        const Matrix& qv = t.value_of(qid);
                        const Matrix& kv = t.value_of(kid);
                        Matrix dq(1, qv.cols());
                        Matrix dk(len, kv.cols());
                        for (int b = 0; b < segs.count(); ++b) {
                          const int r0 = segs.offset[b];
                          dq.noalias() =
                              g.row(b).lazyProduct(kv.middleRows(r0, len)) * scale_factor;
                          dk.noalias() =
                              g.row(b).transpose().lazyProduct(qv.row(b)) * scale_factor;
                          t.accum_block(qid, b, 0, dq);
                          t.accum_block(kid, r0, 0, dk);
                        }
                      });
}

// ---- optimizer --------------------------------------------------------------

void AdamState::ensure(const ParamStore& store) {
  for (const auto& [name, tensor] : store) {
    if (moments.count(name)) continue;
    moments.emplace(name,
                    std::make_pair(Matrix::Zero(tensor.value.rows(), tensor.value.cols()),
                                   Matrix::Zero(tensor.value.rows(), tensor.value.cols())));
  }
}

void adam_step(ParamStore& store, AdamState& state, double lr, double beta1,
               double beta2, double eps) {
  state.ensure(store);
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (auto& [name, tensor] : store) {
    auto& [m, v] = state.moments.at(name);
    m = beta1 * m + (1.0 - beta1) * tensor.grad;
    v = (beta2 * v.array() + (1.0 - beta2) * tensor.grad.array().square()).matrix();
    tensor.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
  }
}

// ---- verification -----------------------------------------------------------

double grad_check(const std::function<Var(Tape&)>& build_loss, ParamStore& params,
                  double eps) {
  params.zero_grads();
  {
    Tape tape(true);
    Var loss = build_loss(tape);
    tape.backward(loss);
  }
  std::map<std::string, Matrix> analytic;
  for (const auto& [name, tensor] : params) analytic.emplace(name, tensor.grad);

  double worst = 0.0;
  for (auto& [name, tensor] : params) {
    const Matrix& g = analytic.at(name);
    for (Eigen::Index i = 0; i < tensor.value.size(); ++i) {
      const double original = tensor.value.data()[i];
      tensor.value.data()[i] = original + eps;
      double up;
      {
        Tape tape(false);
        up = build_loss(tape).scalar();
      }
      tensor.value.data()[i] = original - eps;
      double down;
      {
        Tape tape(false);
        down = build_loss(tape).scalar();
      }
      tensor.value.data()[i] = original;
      const double fd = (up - down) / (2.0 * eps);
      const double a = g.data()[i];
      const double denom = std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  params.zero_grads();
  return worst;
}

}  // namespace routeq::ad
