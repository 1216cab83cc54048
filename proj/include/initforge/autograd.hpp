// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-free reverse-mode automatic differentiation over dense tensors.
//
// Every op returns a Var whose node remembers its inputs and a backward
// closure, but only when at least one input requires a gradient and grad mode
// is enabled. backward() walks the resulting DAG in reverse topological order
// and releases intermediate buffers as it goes, so a graph can be
// differentiated once.
//
// Image activations use a channel-major layout [C, N, H, W] so that
// convolutions map to a single GEMM per batch and batch norm works on
// contiguous rows.

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "initforge/tensor.hpp"

namespace initforge::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_ref() {
    if (grad.data.empty()) grad = Tensor<T>(value.shape);
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var param(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }
  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& value_mut() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  std::int64_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return !node_->grad.data.empty(); }
  const Tensor<T>& grad() const { return node_->grad_ref(); }
  Tensor<T>& grad_mut() { return node_->grad_ref(); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  T item() const { return node_->value.data.at(0); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread for its lifetime.
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

// Seeds d(root)/d(root) = 1; root must hold a single element.
template <typename T>
void backward(const Var<T>& root);

// Elementwise, shapes must match exactly.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);
template <typename T> Var<T> square(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> elu(const Var<T>& a);

// Reductions to a single-element tensor of shape [1].
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

// 2-D products. a is [M,K] (or [K,M] when trans_a), b is [K,N] (or [N,K]).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);
// a [M,N] + b broadcast over rows; b has N elements.
template <typename T> Var<T> add_rowvec(const Var<T>& a, const Var<T>& b);
// x [C, ...] + b[c] on every element of channel c.
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b);

// Shape plumbing.
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
// out.flat[i] = a.flat[index[i]]; backward scatter-adds.
template <typename T>
Var<T> gather(const Var<T>& a, std::vector<std::int64_t> index, Shape out_shape);
// Concatenates 2-D tensors with equal row counts along columns.
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
// Stacks single-row tensors ([1,d] or [d]) into [n,d].
template <typename T> Var<T> stack_rows(std::span<const Var<T>> rows);
template <typename T> Var<T> detach(const Var<T>& a);
// Value of `replacement`, gradient routed unchanged to `a` (straight-through).
template <typename T> Var<T> straight_through(const Var<T>& a, const Tensor<T>& replacement);

// y = x * target_std / sqrt(var(x) + eps), variance over all elements.
template <typename T> Var<T> std_rescale(const Var<T>& x, T target_std, T eps);
// y = centre + x - mean(x).
template <typename T> Var<T> recentre(const Var<T>& x, T centre);

// Convolution on [C,N,H,W] activations with [O,C,k,k] kernels, no bias.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int padding);

// Batch norm over [C, ...] using the batch statistics. When non-null, the
// per-channel batch mean and unbiased variance are written out.
template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        std::vector<T>* batch_mean = nullptr,
                        std::vector<T>* batch_var = nullptr);
template <typename T>
Var<T> batch_norm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                        std::span<const T> mean, std::span<const T> var, T eps);

// [C,N,H,W] -> [N,C]
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
// 2x2 average pooling with stride 2 on [C,N,H,W].
template <typename T> Var<T> avg_pool2(const Var<T>& x);

// Mean softmax cross-entropy of [N,K] logits.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels);

// Mean over rows of the cosine similarity between matching rows of a and b.
// Rows where either side has norm <= eps contribute 0; their count is written
// to `degenerate_rows` when provided.
template <typename T>
Var<T> cosine_rows_mean(const Var<T>& a, const Var<T>& b, T eps = T(1e-12),
                        int* degenerate_rows = nullptr);

}  // namespace initforge::ag
