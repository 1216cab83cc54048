// Copyright (C) 2026 The initforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "initforge/autograd.hpp"

#include <malloc.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace initforge::ag {

namespace {

thread_local bool g_grad_enabled = true;

// Activation buffers are large and short-lived. Serving them from the heap
// instead of fresh mmap pages avoids repeated page-fault zeroing, which
// otherwise doubles the cost of a recorded forward pass.
const bool g_allocator_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc maximum
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
Var<T> make_result(Tensor<T> value, std::initializer_list<const Var<T>*> inputs,
                   std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    for (const Var<T>* in : inputs) {
      if (in->requires_grad()) node->inputs.push_back(in->ptr());
    }
    if (!node->inputs.empty()) {
      node->requires_grad = true;
      node->backward_fn = std::move(fn);
    }
  }
  return Var<T>(std::move(node));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + to_string(a) + " vs " +
                                to_string(b));
  }
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + to_string(s));
  }
}

// Unary elementwise op given f(x) and f'(x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& a, F f, D df) {
  Tensor<T> out(a.shape());
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = f(av[i]);
  return make_result<T>(std::move(out), {&a}, [a, df](Node<T>& self) {
    if (!a.requires_grad()) return;
    auto& ga = a.node()->grad_ref().data;
    const auto& g = self.grad.data;
    const auto& x = a.value().data;
    const auto& y = self.value.data;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void backward(const Var<T>& root) {
  if (root.numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first). The
  // order holds owning pointers because releasing a node's closure below may
  // drop the last other reference to its inputs.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{root.ptr(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root.node()->grad_ref().data[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (!node->backward_fn) continue;  // leaf
    if (!node->grad.data.empty()) node->backward_fn(*node);
    node->backward_fn = nullptr;
    node->inputs.clear();
    node->grad = Tensor<T>();
  }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.value().data[i];
  return make_result<T>(std::move(out), {&a, &b}, [a, b](Node<T>& self) {
    for (const Var<T>* v : {&a, &b}) {
      if (!v->requires_grad()) continue;
      auto& g = v->node()->grad_ref().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.value().data[i];
  return make_result<T>(std::move(out), {&a, &b}, [a, b](Node<T>& self) {
    if (a.requires_grad()) {
      auto& g = a.node()->grad_ref().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
    }
    if (b.requires_grad()) {
      auto& g = b.node()->grad_ref().data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad.data[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
  return make_result<T>(std::move(out), {&a, &b}, [a, b](Node<T>& self) {
    const auto& g = self.grad.data;
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_ref().data;
      const auto& bv = b.value().data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_ref().data;
      const auto& av = a.value().data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  return unary<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return unary<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return unary<T>(a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> elu(const Var<T>& a) {
  return unary<T>(
      a, [](T x) { return x > T(0) ? x : std::expm1(x); },
      [](T x, T y) { return x > T(0) ? T(1) : y + T(1); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().data) total += v;
  return make_result<T>(Tensor<T>({1}, total), {&a}, [a](Node<T>& self) {
    auto& g = a.node()->grad_ref().data;
    const T s = self.grad.data[0];
    for (auto& v : g) v += s;
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale<T>(sum<T>(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a, bool trans_b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const auto ar = a.shape()[0], ac = a.shape()[1];
  const auto br = b.shape()[0], bc = b.shape()[1];
  const auto m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const auto k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + to_string(a.shape()) +
                                " * " + to_string(b.shape()));
  }
  Tensor<T> out({m, n});
  CMapMat<T> am(a.value().ptr(), ar, ac), bm(b.value().ptr(), br, bc);
  MapMat<T> om(out.ptr(), m, n);
  if (!trans_a && !trans_b) om.noalias() = am * bm;
  if (trans_a && !trans_b) om.noalias() = am.transpose() * bm;
  if (!trans_a && trans_b) om.noalias() = am * bm.transpose();
  if (trans_a && trans_b) om.noalias() = am.transpose() * bm.transpose();
  return make_result<T>(std::move(out), {&a, &b}, [a, b, trans_a, trans_b](Node<T>& self) {
    const auto ar = a.shape()[0], ac = a.shape()[1];
    const auto br = b.shape()[0], bc = b.shape()[1];
    CMapMat<T> g(self.grad.ptr(), self.value.shape[0], self.value.shape[1]);
    CMapMat<T> am(a.value().ptr(), ar, ac), bm(b.value().ptr(), br, bc);
    if (a.requires_grad()) {
      MapMat<T> ga(a.node()->grad_ref().ptr(), ar, ac);
      // C = op(A) op(B): dop(A) = G op(B)^T
      if (!trans_a && !trans_b) ga.noalias() += g * bm.transpose();
      if (!trans_a && trans_b) ga.noalias() += g * bm;
      if (trans_a && !trans_b) ga.noalias() += bm * g.transpose();
      if (trans_a && trans_b) ga.noalias() += bm.transpose() * g.transpose();
    }
    if (b.requires_grad()) {
      MapMat<T> gb(b.node()->grad_ref().ptr(), br, bc);
      if (!trans_a && !trans_b) gb.noalias() += am.transpose() * g;
      if (trans_a && !trans_b) gb.noalias() += am * g;
      if (!trans_a && trans_b) gb.noalias() += g.transpose() * am;
      if (trans_a && trans_b) gb.noalias() += g.transpose() * am.transpose();
    }
  });
}

template <typename T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "add_rowvec");
  const auto rows = a.shape()[0], cols = a.shape()[1];
  if (b.numel() != cols) throw std::invalid_argument("add_rowvec: bias length mismatch");
  Tensor<T> out = a.value();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t c = 0; c < cols; ++c) out.data[r * cols + c] += b.value().data[c];
  return make_result<T>(std::move(out), {&a, &b}, [a, b, rows, cols](Node<T>& self) {
    const auto& g = self.grad.data;
    if (a.requires_grad()) {
      auto& ga = a.node()->grad_ref().data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_ref().data;
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
    }
  });
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& b) {
  const auto channels = x.shape().at(0);
  if (b.numel() != channels) throw std::invalid_argument("add_channel_bias: bias length mismatch");
  const auto inner = x.numel() / channels;
  Tensor<T> out = x.value();
  for (std::int64_t c = 0; c < channels; ++c)
    for (std::int64_t i = 0; i < inner; ++i) out.data[c * inner + i] += b.value().data[c];
  return make_result<T>(std::move(out), {&x, &b}, [x, b, channels, inner](Node<T>& self) {
    const auto& g = self.grad.data;
    if (x.requires_grad()) {
      auto& gx = x.node()->grad_ref().data;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.node()->grad_ref().data;
      for (std::int64_t c = 0; c < channels; ++c) {
        T acc = 0;
        for (std::int64_t i = 0; i < inner; ++i) acc += g[c * inner + i];
        gb[c] += acc;
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + to_string(a.shape()) + " as " +
                                to_string(shape));
  }
  Tensor<T> out(std::move(shape), a.value().data);
  return make_result<T>(std::move(out), {&a}, [a](Node<T>& self) {
    auto& g = a.node()->grad_ref().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
  });
}

template <typename T>
Var<T> gather(const Var<T>& a, std::vector<std::int64_t> index, Shape out_shape) {
  if (numel(out_shape) != static_cast<std::int64_t>(index.size())) {
    throw std::invalid_argument("gather: index count does not match output shape");
  }
  Tensor<T> out(std::move(out_shape));
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.numel()) throw std::out_of_range("gather: index");
    out.data[i] = av[static_cast<std::size_t>(index[i])];
  }
  return make_result<T>(std::move(out), {&a}, [a, index = std::move(index)](Node<T>& self) {
    auto& g = a.node()->grad_ref().data;
    for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad.data[i];
  });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: nothing to concatenate");
  const auto rows = parts[0].shape().at(0);
  std::int64_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_cols");
    if (p.shape()[0] != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    cols += p.shape()[1];
  }
  Tensor<T> out({rows, cols});
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const auto pc = p.shape()[1];
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy_n(p.value().ptr() + r * pc, pc, out.ptr() + r * cols + offset);
    offset += pc;
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  std::vector<Var<T>> kept(parts.begin(), parts.end());
  if (g_grad_enabled) {
    for (const auto& p : kept)
      if (p.requires_grad()) node->inputs.push_back(p.ptr());
  }
  if (!node->inputs.empty()) {
    node->requires_grad = true;
    node->backward_fn = [kept, rows, cols](Node<T>& self) {
      std::int64_t off = 0;
      for (const auto& p : kept) {
        const auto pc = p.shape()[1];
        if (p.requires_grad()) {
          auto& g = p.node()->grad_ref().data;
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad.data[r * cols + off + c];
        }
        off += pc;
      }
    };
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> stack_rows(std::span<const Var<T>> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  const auto d = rows[0].numel();
  const auto n = static_cast<std::int64_t>(rows.size());
  Tensor<T> out({n, d});
  for (std::int64_t i = 0; i < n; ++i) {
    if (rows[i].numel() != d) throw std::invalid_argument("stack_rows: ragged rows");
    std::copy_n(rows[i].value().ptr(), d, out.ptr() + i * d);
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(out);
  std::vector<Var<T>> kept(rows.begin(), rows.end());
  if (g_grad_enabled) {
    for (const auto& r : kept)
      if (r.requires_grad()) node->inputs.push_back(r.ptr());
  }
  if (!node->inputs.empty()) {
    node->requires_grad = true;
    node->backward_fn = [kept, d](Node<T>& self) {
      for (std::size_t i = 0; i < kept.size(); ++i) {
        if (!kept[i].requires_grad()) continue;
        auto& g = kept[i].node()->grad_ref().data;
        for (std::int64_t j = 0; j < d; ++j) g[j] += self.grad.data[i * d + j];
      }
    };
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> detach(const Var<T>& a) {
  return Var<T>::constant(a.value());
}

template <typename T>
Var<T> straight_through(const Var<T>& a, const Tensor<T>& replacement) {
  require_same_shape(a.shape(), replacement.shape, "straight_through");
  return make_result<T>(replacement, {&a}, [a](Node<T>& self) {
    auto& g = a.node()->grad_ref().data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
  });
}

template <typename T>
Var<T> std_rescale(const Var<T>& x, T target_std, T eps) {
  const auto& xv = x.value().data;
  const auto n = static_cast<T>(xv.size());
  // Moments in double so the output scale is exact to float rounding even
  // for large tensors.
  double md = 0;
  for (T v : xv) md += v;
  md /= static_cast<double>(xv.size());
  double vd = 0;
  for (T v : xv) vd += (v - md) * (v - md);
  vd /= static_cast<double>(xv.size());
  const double sd = std::sqrt(vd + static_cast<double>(eps));
  const T m = static_cast<T>(md);
  const T s = static_cast<T>(sd);
  Tensor<T> out(x.shape());
  const double ratio = static_cast<double>(target_std) / sd;
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = static_cast<T>(xv[i] * ratio);
  return make_result<T>(std::move(out), {&x}, [x, target_std, m, s, n](Node<T>& self) {
    const auto& xv = x.value().data;
    const auto& g = self.grad.data;
    T gx_dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) gx_dot += g[i] * xv[i];
    auto& gx = x.node()->grad_ref().data;
    const T a = target_std / s;
    const T b = target_std * gx_dot / (n * s * s * s);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += a * g[i] - b * (xv[i] - m);
  });
}

template <typename T>
Var<T> recentre(const Var<T>& x, T centre) {
  const auto& xv = x.value().data;
  T m = 0;
  for (T v : xv) m += v;
  m /= static_cast<T>(xv.size());
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = centre + xv[i] - m;
  return make_result<T>(std::move(out), {&x}, [x](Node<T>& self) {
    const auto& g = self.grad.data;
    T gm = 0;
    for (T v : g) gm += v;
    gm /= static_cast<T>(g.size());
    auto& gx = x.node()->grad_ref().data;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] - gm;
  });
}

namespace {

struct ConvGeometry {
  std::int64_t c, n, h, w, o, k, ho, wo;
  int stride, pad;
  std::int64_t rows() const { return c * k * k; }
  std::int64_t cols() const { return n * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::int64_t plane = g.h * g.w;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::int64_t n = 0; n < g.n; ++n) {
          const T* src = x + (c * g.n + n) * plane;
          T* dst = row + n * g.ho * g.wo;
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            T* d = dst + oh * g.wo;
            if (ih < 0 || ih >= g.h) {
              std::fill_n(d, g.wo, T(0));
              continue;
            }
            const T* s = src + ih * g.w;
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              d[ow] = (iw >= 0 && iw < g.w) ? s[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* x) {
  const std::int64_t plane = g.h * g.w;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t ki = 0; ki < g.k; ++ki) {
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
        for (std::int64_t n = 0; n < g.n; ++n) {
          T* dst = x + (c * g.n + n) * plane;
          const T* src = row + n * g.ho * g.wo;
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h) continue;
            const T* s = src + oh * g.wo;
            T* d = dst + ih * g.w;
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.w) d[iw] += s[ow];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, int stride, int padding) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d kernel");
  ConvGeometry g{};
  g.c = x.shape()[0];
  g.n = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.o = w.shape()[0];
  g.k = w.shape()[2];
  g.stride = stride;
  g.pad = padding;
  if (w.shape()[1] != g.c || w.shape()[3] != g.k) {
    throw std::invalid_argument("conv2d: kernel " + to_string(w.shape()) +
                                " does not match input " + to_string(x.shape()));
  }
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;
  if (g.ho < 1 || g.wo < 1) throw std::invalid_argument("conv2d: empty output");

  const bool direct = g.k == 1 && stride == 1 && padding == 0;
  auto col = std::make_shared<std::vector<T>>();
  const T* col_ptr = x.value().ptr();
  if (!direct) {
    col->resize(static_cast<std::size_t>(g.rows() * g.cols()));
    im2col(x.value().ptr(), g, col->data());
    col_ptr = col->data();
  }
  Tensor<T> out({g.o, g.n, g.ho, g.wo});
  CMapMat<T> wm(w.value().ptr(), g.o, g.rows());
  CMapMat<T> cm(col_ptr, g.rows(), g.cols());
  MapMat<T> om(out.ptr(), g.o, g.cols());
  om.noalias() = wm * cm;

  return make_result<T>(std::move(out), {&x, &w}, [x, w, g, col, direct](Node<T>& self) {
    CMapMat<T> gy(self.grad.ptr(), g.o, g.cols());
    const T* col_ptr = direct ? x.value().ptr() : col->data();
    CMapMat<T> cm(col_ptr, g.rows(), g.cols());
    if (w.requires_grad()) {
      MapMat<T> gw(w.node()->grad_ref().ptr(), g.o, g.rows());
      gw.noalias() += gy * cm.transpose();
    }
    if (x.requires_grad()) {
      CMapMat<T> wm(w.value().ptr(), g.o, g.rows());
      if (direct) {
        MapMat<T> gx(x.node()->grad_ref().ptr(), g.rows(), g.cols());
        gx.noalias() += wm.transpose() * gy;
      } else {
        std::vector<T> gcol(static_cast<std::size_t>(g.rows() * g.cols()));
        MapMat<T> gcm(gcol.data(), g.rows(), g.cols());
        gcm.noalias() = wm.transpose() * gy;
        col2im(gcol.data(), g, x.node()->grad_ref().ptr());
      }
    }
  });
}

template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps,
                        std::vector<T>* batch_mean, std::vector<T>* batch_var) {
  const auto c = x.shape().at(0);
  const auto m = x.numel() / c;
  if (gamma.numel() != c || beta.numel() != c) {
    throw std::invalid_argument("batch_norm: parameter length does not match channels");
  }
  auto xhat = std::make_shared<std::vector<T>>(x.value().data.size());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  Tensor<T> out(x.shape());
  if (batch_mean) batch_mean->assign(static_cast<std::size_t>(c), T(0));
  if (batch_var) batch_var->assign(static_cast<std::size_t>(c), T(0));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const T* row = x.value().ptr() + ch * m;
    T mu = 0;
    for (std::int64_t i = 0; i < m; ++i) mu += row[i];
    mu /= static_cast<T>(m);
    T var = 0;
    for (std::int64_t i = 0; i < m; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(m);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    const T ga = gamma.value().data[ch], be = beta.value().data[ch];
    T* xh = xhat->data() + ch * m;
    T* o = out.ptr() + ch * m;
    for (std::int64_t i = 0; i < m; ++i) {
      xh[i] = (row[i] - mu) * is;
      o[i] = ga * xh[i] + be;
    }
    if (batch_mean) (*batch_mean)[ch] = mu;
    if (batch_var) (*batch_var)[ch] = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
  }
  return make_result<T>(
      std::move(out), {&x, &gamma, &beta}, [x, gamma, beta, xhat, inv_std, c, m](Node<T>& self) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* g = self.grad.ptr() + ch * m;
          const T* xh = xhat->data() + ch * m;
          T sum_g = 0, sum_gx = 0;
          for (std::int64_t i = 0; i < m; ++i) {
            sum_g += g[i];
            sum_gx += g[i] * xh[i];
          }
          if (gamma.requires_grad()) gamma.node()->grad_ref().data[ch] += sum_gx;
          if (beta.requires_grad()) beta.node()->grad_ref().data[ch] += sum_g;
          if (x.requires_grad()) {
            const T ga = gamma.value().data[ch];
            const T k = ga * (*inv_std)[ch] / static_cast<T>(m);
            T* gx = x.node()->grad_ref().ptr() + ch * m;
            for (std::int64_t i = 0; i < m; ++i) {
              gx[i] += k * (static_cast<T>(m) * g[i] - sum_g - xh[i] * sum_gx);
            }
          }
        }
      });
}

template <typename T>
Var<T> batch_norm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                        std::span<const T> mean, std::span<const T> var, T eps) {
  const auto c = x.shape().at(0);
  const auto m = x.numel() / c;
  if (static_cast<std::int64_t>(mean.size()) != c || static_cast<std::int64_t>(var.size()) != c) {
    throw std::invalid_argument("batch_norm_infer: statistics length mismatch");
  }
  std::vector<T> inv_std(static_cast<std::size_t>(c));
  Tensor<T> out(x.shape());
  for (std::int64_t ch = 0; ch < c; ++ch) {
    inv_std[ch] = T(1) / std::sqrt(var[ch] + eps);
    const T* row = x.value().ptr() + ch * m;
    T* o = out.ptr() + ch * m;
    for (std::int64_t i = 0; i < m; ++i) {
      o[i] = gamma.value().data[ch] * (row[i] - mean[ch]) * inv_std[ch] + beta.value().data[ch];
    }
  }
  std::vector<T> mu(mean.begin(), mean.end());
  return make_result<T>(
      std::move(out), {&x, &gamma, &beta}, [x, gamma, beta, mu, inv_std, c, m](Node<T>& self) {
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const T* g = self.grad.ptr() + ch * m;
          const T* row = x.value().ptr() + ch * m;
          T sum_g = 0, sum_gx = 0;
          for (std::int64_t i = 0; i < m; ++i) {
            sum_g += g[i];
            sum_gx += g[i] * (row[i] - mu[ch]) * inv_std[ch];
          }
          if (gamma.requires_grad()) gamma.node()->grad_ref().data[ch] += sum_gx;
          if (beta.requires_grad()) beta.node()->grad_ref().data[ch] += sum_g;
          if (x.requires_grad()) {
            T* gx = x.node()->grad_ref().ptr() + ch * m;
            const T k = gamma.value().data[ch] * inv_std[ch];
            for (std::int64_t i = 0; i < m; ++i) gx[i] += k * g[i];
          }
        }
      });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const auto c = x.shape()[0], n = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  Tensor<T> out({n, c});
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < n; ++i) {
      const T* p = x.value().ptr() + (ch * n + i) * hw;
      T s = 0;
      for (std::int64_t j = 0; j < hw; ++j) s += p[j];
      out.data[i * c + ch] = s / static_cast<T>(hw);
    }
  return make_result<T>(std::move(out), {&x}, [x, c, n, hw](Node<T>& self) {
    auto& g = x.node()->grad_ref().data;
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t i = 0; i < n; ++i) {
        const T v = self.grad.data[i * c + ch] / static_cast<T>(hw);
        T* p = g.data() + (ch * n + i) * hw;
        for (std::int64_t j = 0; j < hw; ++j) p[j] += v;
      }
  });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank(x.shape(), 4, "avg_pool2");
  const auto c = x.shape()[0], n = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const auto ho = h / 2, wo = w / 2;
  if (ho < 1 || wo < 1) throw std::invalid_argument("avg_pool2: input too small");
  Tensor<T> out({c, n, ho, wo});
  for (std::int64_t p = 0; p < c * n; ++p)
    for (std::int64_t i = 0; i < ho; ++i)
      for (std::int64_t j = 0; j < wo; ++j) {
        const T* s = x.value().ptr() + p * h * w;
        out.data[(p * ho + i) * wo + j] =
            T(0.25) * (s[2 * i * w + 2 * j] + s[2 * i * w + 2 * j + 1] +
                       s[(2 * i + 1) * w + 2 * j] + s[(2 * i + 1) * w + 2 * j + 1]);
      }
  return make_result<T>(std::move(out), {&x}, [x, c, n, h, w, ho, wo](Node<T>& self) {
    auto& g = x.node()->grad_ref().data;
    for (std::int64_t p = 0; p < c * n; ++p)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          const T v = T(0.25) * self.grad.data[(p * ho + i) * wo + j];
          T* d = g.data() + p * h * w;
          d[2 * i * w + 2 * j] += v;
          d[2 * i * w + 2 * j + 1] += v;
          d[(2 * i + 1) * w + 2 * j] += v;
          d[(2 * i + 1) * w + 2 * j + 1] += v;
        }
  });
}

template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const auto n = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  }
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* z = logits.value().ptr() + i * k;
    const T mx = *std::max_element(z, z + k);
    T s = 0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(z[j] - mx);
    for (std::int64_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(z[j] - mx) / s;
    const int y = labels[i];
    if (y < 0 || y >= k) throw std::out_of_range("softmax_cross_entropy: label out of range");
    loss += -(z[y] - mx - std::log(s));
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return make_result<T>(Tensor<T>({1}, loss / static_cast<T>(n)), {&logits},
                        [logits, probs, ys, n, k](Node<T>& self) {
                          auto& g = logits.node()->grad_ref().data;
                          const T s = self.grad.data[0] / static_cast<T>(n);
                          for (std::int64_t i = 0; i < n; ++i)
                            for (std::int64_t j = 0; j < k; ++j)
                              g[i * k + j] +=
                                  s * ((*probs)[i * k + j] - (j == ys[i] ? T(1) : T(0)));
                        });
}

template <typename T>
Var<T> cosine_rows_mean(const Var<T>& a, const Var<T>& b, T eps, int* degenerate_rows) {
  require_same_shape(a.shape(), b.shape(), "cosine_rows_mean");
  require_rank(a.shape(), 2, "cosine_rows_mean");
  const auto n = a.shape()[0], k = a.shape()[1];
  if (n < 1) throw std::invalid_argument("cosine_rows_mean: empty batch");
  // Per row: norms and cosine; a zero norm marks the row degenerate.
  auto stats = std::make_shared<std::vector<T>>(static_cast<std::size_t>(3 * n));
  T total = 0;
  int degenerate = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const T* x = a.value().ptr() + i * k;
    const T* y = b.value().ptr() + i * k;
    T xx = 0, yy = 0, xy = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      xx += x[j] * x[j];
      yy += y[j] * y[j];
      xy += x[j] * y[j];
    }
    const T na = std::sqrt(xx), nb = std::sqrt(yy);
    T cs = 0;
    if (na <= eps || nb <= eps) {
      ++degenerate;
    } else {
      cs = xy / (na * nb);
    }
    (*stats)[3 * i] = na;
    (*stats)[3 * i + 1] = nb;
    (*stats)[3 * i + 2] = cs;
    total += cs;
  }
  if (degenerate_rows) *degenerate_rows = degenerate;
  return make_result<T>(
      Tensor<T>({1}, total / static_cast<T>(n)), {&a, &b}, [a, b, stats, n, k, eps](Node<T>& self) {
        const T s = self.grad.data[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) {
          const T na = (*stats)[3 * i], nb = (*stats)[3 * i + 1], cs = (*stats)[3 * i + 2];
          if (na <= eps || nb <= eps) continue;
          const T* x = a.value().ptr() + i * k;
          const T* y = b.value().ptr() + i * k;
          if (a.requires_grad()) {
            T* gx = a.node()->grad_ref().ptr() + i * k;
            for (std::int64_t j = 0; j < k; ++j)
              gx[j] += s * (y[j] / (na * nb) - cs * x[j] / (na * na));
          }
          if (b.requires_grad()) {
            T* gy = b.node()->grad_ref().ptr() + i * k;
            for (std::int64_t j = 0; j < k; ++j)
              gy[j] += s * (x[j] / (na * nb) - cs * y[j] / (nb * nb));
          }
        }
      });
}

#define INITFORGE_INSTANTIATE(T)                                                              \
  template void backward<T>(const Var<T>&);                                                   \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                       \
  template Var<T> scale<T>(const Var<T>&, T);                                                 \
  template Var<T> add_scalar<T>(const Var<T>&, T);                                            \
  template Var<T> exp<T>(const Var<T>&);                                                      \
  template Var<T> log<T>(const Var<T>&);                                                      \
  template Var<T> square<T>(const Var<T>&);                                                   \
  template Var<T> sigmoid<T>(const Var<T>&);                                                  \
  template Var<T> tanh<T>(const Var<T>&);                                                     \
  template Var<T> relu<T>(const Var<T>&);                                                     \
  template Var<T> elu<T>(const Var<T>&);                                                      \
  template Var<T> sum<T>(const Var<T>&);                                                      \
  template Var<T> mean<T>(const Var<T>&);                                                     \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&, bool, bool);                        \
  template Var<T> add_rowvec<T>(const Var<T>&, const Var<T>&);                                \
  template Var<T> add_channel_bias<T>(const Var<T>&, const Var<T>&);                          \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                           \
  template Var<T> gather<T>(const Var<T>&, std::vector<std::int64_t>, Shape);                 \
  template Var<T> concat_cols<T>(std::span<const Var<T>>);                                    \
  template Var<T> stack_rows<T>(std::span<const Var<T>>);                                     \
  template Var<T> detach<T>(const Var<T>&);                                                   \
  template Var<T> straight_through<T>(const Var<T>&, const Tensor<T>&);                       \
  template Var<T> std_rescale<T>(const Var<T>&, T, T);                                        \
  template Var<T> recentre<T>(const Var<T>&, T);                                              \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, int, int);                          \
  template Var<T> batch_norm_train<T>(const Var<T>&, const Var<T>&, const Var<T>&, T,         \
                                      std::vector<T>*, std::vector<T>*);                      \
  template Var<T> batch_norm_infer<T>(const Var<T>&, const Var<T>&, const Var<T>&,            \
                                      std::span<const T>, std::span<const T>, T);             \
  template Var<T> global_avg_pool<T>(const Var<T>&);                                          \
  template Var<T> avg_pool2<T>(const Var<T>&);                                                \
  template Var<T> softmax_cross_entropy<T>(const Var<T>&, std::span<const int>);              \
  template Var<T> cosine_rows_mean<T>(const Var<T>&, const Var<T>&, T, int*);

INITFORGE_INSTANTIATE(float)
INITFORGE_INSTANTIATE(double)

#undef INITFORGE_INSTANTIATE

}  // namespace initforge::ag
