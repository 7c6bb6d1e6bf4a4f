#pragma once

// Reverse-mode differentiation over dense tensors.
//
// Every operation records a closure that accumulates its input gradients
// from its output gradient. Leaves created with Var::leaf() keep their
// gradient across backward() calls until zero_grad(), which is what
// gradient accumulation relies on.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "thm/rng.hpp"
#include "thm/tensor.hpp"

namespace thm {

using TokenId = std::int32_t;

namespace detail {
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};
}  // namespace detail

class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var leaf(Tensor value);

  bool defined() const noexcept { return node_ != nullptr; }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  /// Gradient buffer; allocated (zero) on first access.
  Tensor& grad();
  const Tensor& grad() const;
  void zero_grad();

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// A named trainable tensor. Names are unique within one model.
struct Parameter {
  std::string name;
  Var var;

  const Tensor& value() const { return var.value(); }
  Tensor& value() { return var.value(); }
  Tensor& grad() { return var.grad(); }
};

using ParameterList = std::vector<Parameter>;

/// Runs the backward pass from a single-element root, seeding d(root) = 1.
void backward(const Var& root);

bool grad_enabled() noexcept;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- plain tensor math -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& x);

// ---- differentiable operations -----------------------------------------

Var matmul(const Var& a, const Var& b);
/// a · bᵀ
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
/// Adds a length-d vector to every row of an n×d matrix.
Var add_rowwise(const Var& x, const Var& bias);
Var scale(const Var& x, double s);
Var relu(const Var& x);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Training: zero each element with probability p, scale survivors by 1/(1-p).
/// Inference (or p == 0): identity.
Var dropout(const Var& x, double p, Rng& rng, bool training);
Var concat_cols(const Var& a, const Var& b);
/// Same data, new shape of equal size.
Var reshape(const Var& x, Shape shape);
/// Rows [begin, begin + count) of a matrix.
Var slice_rows(const Var& x, std::size_t begin, std::size_t count);
/// Row `ids[i]` of `table` for each i.
Var gather_rows(const Var& table, std::span<const TokenId> ids);
/// x · W + b
Var linear(const Var& x, const Var& weight, const Var& bias);

/// Mean label-smoothed negative log-likelihood over positions whose target
/// is not `pad_id`. Returns a one-element tensor.
///
/// Per position: (1 - eps) * -log p[target] + eps * mean_j(-log p[j]).
Var cross_entropy(const Var& logits, std::span<const TokenId> targets, double smoothing,
                  TokenId pad_id);

}  // namespace thm
