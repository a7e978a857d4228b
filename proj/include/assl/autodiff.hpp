// SPDX-License-Identifier: Apache-2.0
/**
 * @file   autodiff.hpp
 * @brief  Tape-based reverse-mode differentiation over dense Eigen matrices.
 *
 * Every value on the tape is a 2-D matrix. Batched activations use a
 * features x batch layout (one column per sample). Parameters live outside
 * the tape; a tape binds them as leaves and hands back their gradients after
 * backward(), so forward passes never mutate model state.
 */
#pragma once

#include <Eigen/Dense>

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace assl::ad {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// A named trainable matrix.
struct Parameter {
  std::string name;
  Matrix value;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {}
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape &tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Matrix &value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  /// Value of a 1x1 node.
  double scalar() const;

 private:
  friend class Tape;
  Var(Tape *tape, int id) : tape_(tape), id_(id) {}

  Tape *tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Propagates the gradient of node `self` into its inputs.
  using Backward = std::function<void(Tape &, int self)>;

  /// With record=false no backward closures are stored and every node is a
  /// constant; used for inference passes.
  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape &) = delete;
  Tape &operator=(const Tape &) = delete;

  Var constant(Matrix value);
  /// Leaf whose gradient can be read back with grad().
  Var variable(Matrix value);
  /// Leaf bound to a parameter; repeated binds return the same node.
  Var bind(const Parameter &p);
  /// Parameters frozen before binding enter the tape as constants.
  void freeze(const Parameter &p) { frozen_.insert(&p); }
  void freeze(std::span<const Parameter *const> params);

  /// Records an op. The node requires a gradient iff any input does.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backward fn);
  Var record(Matrix value, std::span<const Var> inputs, Backward fn);

  bool recording() const { return record_; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }
  const Matrix &value(int id) const { return nodes_[id].value; }
  const Matrix &value(Var v) const { return value(v.id()); }

  /// Upstream gradient of a node during backward.
  const Matrix &upstream(int id) const { return nodes_[id].grad; }

  template <class Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived> &g) {
    Node &n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  template <class Derived>
  void accumulate_block(int id, Eigen::Index row, Eigen::Index col,
                        const Eigen::MatrixBase<Derived> &g) {
    Node &n = nodes_[id];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    n.grad.block(row, col, g.rows(), g.cols()) += g;
  }

  /// Reverse sweep from a 1x1 root.
  void backward(Var root);

  /// Gradient of the last backward() root w.r.t. a node (zeros if unreached).
  Matrix grad(Var v) const;
  /// Gradient w.r.t. a bound parameter (zeros if never bound or unreached).
  Matrix grad(const Parameter &p) const;
  std::vector<Matrix> gradients(std::span<const Parameter *const> params) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var push(Matrix value, bool requires_grad, Backward fn);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter *, int> bound_;
  std::unordered_set<const Parameter *> frozen_;
  bool record_;
};

// ---------------------------------------------------------------------------
// Ops. Shapes follow Eigen conventions; mismatches throw std::invalid_argument.
// ---------------------------------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// x (r x n) + b (r x 1) broadcast over columns.
Var add_bias(Var x, Var b);
/// a (r x n) scaled columnwise by w (1 x n).
Var mul_row_broadcast(Var a, Var w);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);
Var leaky_relu(Var a, double slope);
Var abs(Var a);
Var exp(Var a);
Var square(Var a);
/// log(max(a, floor)); zero gradient where the floor is active.
Var log_floor(Var a, double floor);
/// Elementwise clamp; zero gradient outside [lo, hi].
Var clamp(Var a, double lo, double hi);
Var stop_gradient(Var a);

/// Softmax down each column.
Var softmax_cols(Var a);
/// Softmax within consecutive groups of `group` columns, per row.
Var group_softmax(Var a, Eigen::Index group);

Var sum(Var a);   // 1x1
Var mean(Var a);  // 1x1
/// Column sums (1 x n).
Var sum_rows(Var a);
/// Sums consecutive groups of `group` columns: r x (n*group) -> r x n.
Var group_sum_cols(Var a, Eigen::Index group);
/// Repeats each column `times` times consecutively: r x n -> r x (n*times).
Var repeat_cols(Var a, Eigen::Index times);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var gather_cols(Var a, std::span<const Eigen::Index> indices);

/// Fused gated-recurrent-unit update. `gi` and `gh` are the stacked
/// [reset; update; candidate] pre-activations of the input and hidden
/// projections (3H x B); `h` is the previous state (H x B).
///   r = s(gi_r + gh_r), z = s(gi_z + gh_z), n = tanh(gi_n + r * gh_n)
///   h' = (1 - z) * n + z * h
Var gru_cell(Var gi, Var gh, Var h);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator-(Var a) { return scale(a, -1.0); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace assl::ad
