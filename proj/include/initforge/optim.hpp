// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "initforge/autograd.hpp"

namespace initforge {

// SGD with heavy-ball momentum and coupled L2 weight decay:
//   d = g + wd * p;  v = mu * v + d;  p -= lr * v
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<ag::Var<T>> params, T momentum, T weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(T lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto& w = p.value_mut().data;
      const auto& g = p.grad().data;
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T d = g[i] + weight_decay_ * w[i];
        v[i] = momentum_ * v[i] + d;
        w[i] -= lr * v[i];
      }
    }
  }

 private:
  std::vector<ag::Var<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T momentum_;
  T weight_decay_;
};

// Adam with coupled L2 weight decay (decay added to the gradient).
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<ag::Var<T>> params, T weight_decay = T(0), T beta1 = T(0.9),
                T beta2 = T(0.999), T eps = T(1e-8))
      : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), T(0));
      v_.emplace_back(p.numel(), T(0));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(T lr) {
    ++t_;
    const T c1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T c2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& w = p.value_mut().data;
      const bool has = p.has_grad();
      if (!has && weight_decay_ == T(0)) continue;
      for (std::size_t i = 0; i < w.size(); ++i) {
        const T g = (has ? p.grad().data[i] : T(0)) + weight_decay_ * w[i];
        m_[k][i] = beta1_ * m_[k][i] + (T(1) - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (T(1) - beta2_) * g * g;
        w[i] -= lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
      }
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<ag::Var<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  T weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace initforge
