#pragma once

// Define-by-run reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive in creation order together with an adjoint
// rule. Tapes are single-owner and are rebuilt for each forward pass.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ushl/tensor.hpp"

namespace ushl::ad {

using NodeId = std::size_t;

template <typename Scalar>
class Tape;

template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }
  NodeId id() const { return id_; }
  Tape<Scalar>* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Gradient of a scalar root with respect to every node that needs one.
/// Leaves that the root does not depend on receive zeros.
template <typename Scalar>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor<Scalar>> grads) : grads_(std::move(grads)) {}

  const Tensor<Scalar>& operator[](NodeId id) const { return grads_.at(id); }
  const Tensor<Scalar>& operator[](const Var<Scalar>& v) const { return grads_.at(v.id()); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor<Scalar>> grads_;
};

template <typename Scalar>
class Tape {
 public:
  /// Accumulates contributions of the output gradient into the gradients of
  /// the node's inputs. grad_in[k] is null when input k needs no gradient.
  using Adjoint = std::function<void(const Tensor<Scalar>& grad_out,
                                     std::span<Tensor<Scalar>* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that gradients flow into (model parameters, probe inputs).
  Var<Scalar> variable(Tensor<Scalar> value, std::string_view name = "variable");
  /// Leaf that is treated as a fixed input.
  Var<Scalar> constant(Tensor<Scalar> value);

  Var<Scalar> record(std::string_view op, Tensor<Scalar> value,
                     std::vector<NodeId> inputs, Adjoint adjoint);

  Gradients<Scalar> backward(const Var<Scalar>& root) const;

  const Tensor<Scalar>& value(NodeId id) const { return nodes_.at(id).value; }
  bool needs_grad(NodeId id) const { return nodes_.at(id).needs_grad; }
  std::string_view op(NodeId id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  /// Sign pattern (-1/0/+1) of every input seen by a non-smooth primitive
  /// (relu, clamp). Two evaluations with equal patterns lie on the same
  /// smooth piece of the function.
  void note_kinks(std::span<const Scalar> distance_to_kink);
  const std::vector<std::int8_t>& kink_pattern() const { return kinks_; }

 private:
  struct Node {
    std::string op;
    Tensor<Scalar> value;
    std::vector<NodeId> inputs;
    Adjoint adjoint;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::int8_t> kinks_;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Primitive set

struct Conv3dOptions {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
  /// Temporal padding wraps around instead of reading zeros. Test hook for
  /// checking shift equivariance.
  bool circular_time = false;
};

template <typename Scalar>
struct BatchStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
};

enum class NormMode { kTrain, kEval };

template <typename S> Var<S> matmul(const Var<S>& a, const Var<S>& b);
/// x [.., n] + b [n]
template <typename S> Var<S> bias_add(const Var<S>& x, const Var<S>& b);
template <typename S> Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b);

/// x [N, Ci, T, H, W], w [Co, Ci, kt, kh, kw] -> [N, Co, T', H', W']
template <typename S> Var<S> conv3d(const Var<S>& x, const Var<S>& w, const Conv3dOptions& opt);

/// Per-channel normalization of x [N, C, T, H, W]. In train mode the batch
/// statistics are written to `observed` (biased mean, unbiased variance) so
/// the caller can fold them into running statistics.
template <typename S>
Var<S> batchnorm3d(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta,
                   NormMode mode, const BatchStats<S>& running, S eps,
                   BatchStats<S>* observed);

template <typename S> Var<S> relu(const Var<S>& x);
template <typename S> Var<S> sigmoid(const Var<S>& x);
template <typename S> Var<S> log(const Var<S>& x);
template <typename S> Var<S> clamp(const Var<S>& x, S lo, S hi);
template <typename S> Var<S> softmax(const Var<S>& x, std::size_t axis);

template <typename S> Var<S> add(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> sub(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> mul(const Var<S>& a, const Var<S>& b);
template <typename S> Var<S> scale(const Var<S>& x, S factor);
template <typename S> Var<S> add_scalar(const Var<S>& x, S offset);

template <typename S> Var<S> concat(std::span<const Var<S>> xs, std::size_t axis);
/// Entries [begin, end) along `axis`.
template <typename S> Var<S> slice(const Var<S>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename S> Var<S> sum(const Var<S>& x);
template <typename S> Var<S> mean(const Var<S>& x);
/// Mean over one axis; the axis is removed from the shape.
template <typename S> Var<S> mean_axis(const Var<S>& x, std::size_t axis);

/// Keeps x[i] where mask[i] != 0. x must be rank 1.
template <typename S> Var<S> masked_select(const Var<S>& x, std::span<const std::uint8_t> mask);

/// x [M, K, C] -> A x W with A [G, K] fixed, W [C, C'].
template <typename S> Var<S> graph_conv(const Var<S>& x, const Tensor<S>& adjacency, const Var<S>& w);
/// x [M, K, C] -> A x with A [G, K] fixed (graph_conv with W = I).
template <typename S> Var<S> graph_pool(const Var<S>& x, const Tensor<S>& adjacency);

/// c [B, n], x [B, n, d] -> [B, d], out[b] = sum_i c[b, i] x[b, i].
template <typename S> Var<S> weighted_sum(const Var<S>& c, const Var<S>& x);
/// x [n, d], w [n] -> x[i, :] * w[i].
template <typename S> Var<S> scale_rows(const Var<S>& x, const Var<S>& w);

template <typename S> Var<S> reshape(const Var<S>& x, Shape shape);
template <typename S> Var<S> permute(const Var<S>& x, std::span<const std::size_t> perm);

template <typename S> Var<S> operator+(const Var<S>& a, const Var<S>& b) { return add(a, b); }
template <typename S> Var<S> operator-(const Var<S>& a, const Var<S>& b) { return sub(a, b); }
template <typename S> Var<S> operator*(const Var<S>& a, const Var<S>& b) { return mul(a, b); }

// Pure tensor helpers shared by tests and model code.
template <typename S> Tensor<S> permuted(const Tensor<S>& x, std::span<const std::size_t> perm);

}  // namespace ushl::ad
