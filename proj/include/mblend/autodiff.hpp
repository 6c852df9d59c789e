#pragma once

// Small reverse-mode automatic differentiation over dense matrices.
//
// Every backward rule is written in terms of differentiable ops, so gradients
// computed with `create_graph = true` can themselves be differentiated. The
// critic's gradient penalty relies on this.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace mblend::ad {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Var;

struct Node {
  Matrix value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  // Maps the gradient of this node to gradients of `inputs` (same order).
  std::function<std::vector<Var>(const Var&)> backward;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  // Only meaningful for leaves (parameters updated in place by optimizers).
  Matrix& mutable_value() { return node_->value; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;
  Node* node() const { return node_.get(); }
  bool defined() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Treats the given leaves as constants while alive, so graphs built in the
// meantime do not track them.
class FreezeGuard {
 public:
  explicit FreezeGuard(std::vector<Var> leaves);
  ~FreezeGuard();
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Var> leaves_;
  std::vector<bool> previous_;
};

Var constant(Matrix value);
Var parameter(Matrix value);
Var scalar(double value);

// Gradients of a 1x1 `output` with respect to `inputs`. Unreachable inputs get
// zero gradients. With `create_graph`, the returned Vars are differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, bool create_graph = false);

// Index table for gather/scatter: entry k of the output (column-major) reads
// source entry `source[k]`, or zero when it is negative.
struct IndexMap {
  Index source_rows = 0;
  Index source_cols = 0;
  Index out_rows = 0;
  Index out_cols = 0;
  std::vector<Index> source;
};

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var mul_const(const Var& a, const Matrix& mask);

// x (C x T) + b (C x 1) broadcast over columns.
Var add_col_bias(const Var& x, const Var& bias);
Var sum_cols(const Var& x);                    // R x C -> R x 1
Var broadcast_cols(const Var& x, Index cols);  // R x 1 -> R x cols
Var sum_rows(const Var& x);                    // R x C -> 1 x C
Var broadcast_rows(const Var& x, Index rows);  // 1 x C -> rows x C
Var sum(const Var& x);                         // -> 1 x 1
Var mean(const Var& x);
Var broadcast_scalar(const Var& s, Index rows, Index cols);

Var leaky_relu(const Var& x, double slope);
Var abs(const Var& x);
Var square(const Var& x);
Var sqrt(const Var& x);
Var sigmoid(const Var& x);

Var rows(const Var& x, Index start, Index count);
Var pad_rows(const Var& x, Index start, Index total);
Var cols(const Var& x, Index start, Index count);
Var pad_cols(const Var& x, Index start, Index total);
Var concat_rows(const std::vector<Var>& parts);

Var gather(const Var& x, std::shared_ptr<const IndexMap> map);
Var scatter_add(const Var& x, std::shared_ptr<const IndexMap> map);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace mblend::ad
