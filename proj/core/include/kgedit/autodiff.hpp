#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// Every operation builds a Node holding its value, its parents and a closure
// that propagates the node's gradient into them. Nodes whose parents all have
// requires_grad == false are treated as constants: no closure is recorded and
// backward() never visits them, which is how frozen weights stay gradient-free.
//
// Broadcasting rule (binary elementwise ops): the right operand either has the
// same shape as the left one, holds a single element, or has a shape equal to
// a trailing suffix of the left shape (e.g. (d) against (n, d)); its values are
// then repeated across the leading axes. No other broadcasting exists.
//
// Every op checks its output for NaN/Inf and throws NonFiniteError naming the
// op. Gradients are accumulated in reverse topological order of a depth-first
// traversal from the loss, so repeated runs sum contributions in the same order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kgedit/tensor.hpp"

namespace kgedit::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  // Zero-initialized gradient buffer of value's shape.
  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  // In-place access for optimizers and initializers; only meaningful on leaves.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient, or an all-zero tensor when nothing has been accumulated.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Propagates d(loss)/d(node) to every reachable node requiring gradients.
// Leaf gradients accumulate across calls; clear them with zero_grad().
void backward(const Var& loss);

// ---- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

// ---- elementwise ------------------------------------------------------------

enum class Elementwise { add, sub, mul, sigmoid, tanh, relu };

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var relu(const Var& x);
Var scale(const Var& x, double factor);

// Dispatch by tag; unary ops take exactly one argument, binary ops two.
Var elementwise(Elementwise op, std::span<const Var> args);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- reductions and normalization -------------------------------------------

Var sum(const Var& x);
Var mean(const Var& x);

// Softmax along `axis` with max subtraction.
Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x);  // last axis

// Mean over rows of -log softmax(logits)[target]. `logits` is (B, C) or (C);
// targets.size() must equal B (1 for rank-1 logits).
Var cross_entropy(const Var& logits, std::span<const std::size_t> targets);
inline Var cross_entropy(const Var& logits, std::size_t target) {
  return cross_entropy(logits, std::span<const std::size_t>(&target, 1));
}

// Mean binary cross-entropy of sigmoid(logits) against 0/1 labels.
Var binary_cross_entropy(const Var& logits, std::span<const double> labels);

// Mean over rows of KL(softmax(logits) || reference), where `reference_log_probs`
// holds log-probabilities of the same (B, C) shape and is treated as constant.
Var kl_divergence(const Var& logits, const Tensor& reference_log_probs);

inline constexpr double kLayerNormEpsilon = 1e-5;

// Normalizes over the last axis, then applies gain and bias (both (d)).
// A zero-variance row maps to bias (its centered values are all zero).
Var layer_norm(const Var& x, const Var& gain, const Var& bias);

// ---- indexing ---------------------------------------------------------------

// Rows `index[i]` of a 2-D tensor, stacked into (index.size(), cols).
Var gather_rows(const Var& table, std::span<const std::size_t> index);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var concat_cols(const Var& a, const Var& b);

// Scaled dot-product self-attention for `batch` sequences packed row-wise
// into (batch * seq_len, heads * head_dim) tensors. Keys at positions
// >= lengths[b] are ignored; output rows at those positions are zero.
Var attention(const Var& q, const Var& k, const Var& v, std::size_t batch,
              std::size_t seq_len, std::size_t heads,
              std::span<const std::size_t> lengths);

// ---- verification -------------------------------------------------------------

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor for the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // 0 checks every coordinate; otherwise this many sampled coordinates.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

// Compares backward() against central differences. `f` must rebuild its graph
// from the current parameter values on every call and return a scalar.
GradCheckReport grad_check(const std::function<Var()>& f, std::span<Var> params,
                           const GradCheckOptions& options = {});

}  // namespace kgedit::ad
