// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the tape that records operations for
// reverse-mode differentiation. Everything is templated on the scalar type so
// the same model code runs in float (default) and double (gradient checks).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "blankfill/errors.hpp"

namespace blankfill {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
void check_finite(std::span<const T> values, std::string_view what) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
  }
}

/// Handle to a shared tensor node. Copies alias the same storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    check_finite<T>(data, "tensor");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  /// Wraps an already-validated node. Used by operations.
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  /// Size of the last axis (1 for scalars).
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }
  /// Product of all axes but the last.
  std::size_t rows() const { return cols() == 0 ? 0 : numel() / cols(); }

  std::span<const T> data() const { return node_->data; }
  /// In-place access for optimizers and checkpoint loading.
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  const NodePtr& node() const { return node_; }

  /// Deep copy with no autograd history.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->data, requires_grad);
  }

 private:
  NodePtr node_;
};

/// Ordered record of executed operations. Entries are appended as operations
/// run, so the record is topologically sorted and backward just walks it in
/// reverse.
template <typename T>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// True when an operation over these inputs must be recorded.
  template <typename... Ts>
  bool tracks(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  void record(std::string_view op, NodePtr output, std::function<void()> backward) {
    output->requires_grad = true;
    entries_.push_back(Entry{op, std::move(output), std::move(backward)});
  }

  /// Populates grad on every requires_grad tensor reachable from `loss`.
  /// Leaf gradients accumulate across calls; call zero_grad between steps.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward: loss does not depend on any parameter");
    }
    const auto& root = loss.node();
    std::size_t end = entries_.size();
    while (end > 0 && entries_[end - 1].output != root) --end;
    if (end == 0) {
      // A leaf loss still gets its trivial gradient.
      root->ensure_grad();
      root->grad[0] += T(1);
      return;
    }
    root->ensure_grad();
    root->grad[0] += T(1);
    for (std::size_t i = end; i-- > 0;) {
      Entry& e = entries_[i];
      if (e.output->grad.empty()) continue;  // not reachable from loss
      e.backward();
    }
  }

 private:
  struct Entry {
    std::string_view op;
    NodePtr output;
    std::function<void()> backward;
  };

  std::vector<Entry> entries_;
  bool recording_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_node(Shape shape, std::vector<T> data, std::string_view op) {
  check_finite<T>(data, op);
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, std::string_view op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a[m x k] * b[k x n]
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  auto node = detail::make_node<T>({m, n}, std::move(out), "matmul");
  if (tape.tracks(a, b)) {
    auto an = a.node(), bn = b.node();
    TensorNode<T>* on = node.get();
    tape.record("matmul", node, [an, bn, on, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm_nt(m, n, k, on->grad.data(), bn->data.data(), an->grad.data());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::gemm_tn(m, k, n, an->data.data(), on->grad.data(), bn->grad.data());
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// a[m x k] * b[n x k]^T. Used for the tied output projection.
template <typename T>
Tensor<T> matmul_nt(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul_nt");
  detail::require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  auto node = detail::make_node<T>({m, n}, std::move(out), "matmul_nt");
  if (tape.tracks(a, b)) {
    auto an = a.node(), bn = b.node();
    TensorNode<T>* on = node.get();
    tape.record("matmul_nt", node, [an, bn, on, m, k, n] {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::gemm_nn(m, n, k, on->grad.data(), bn->data.data(), an->grad.data());
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::gemm_tn(m, n, k, on->grad.data(), an->data.data(), bn->grad.data());
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

enum class Broadcast { kSame, kRow };

template <typename T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.rank() == 1 && a.rank() >= 1 && b.numel() == a.cols()) return Broadcast::kRow;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                       shape_str(a.shape()));
}

}  // namespace detail

/// a + b, where b has a's shape or is a vector broadcast over a's rows.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "add");
  const std::size_t n = a.numel(), cols = a.cols();
  std::vector<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  if (kind == detail::Broadcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) out[i] += bd[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] += bd[i % cols];
  }
  auto node = detail::make_node<T>(a.shape(), std::move(out), "add");
  if (tape.tracks(a, b)) {
    auto an = a.node(), bn = b.node();
    TensorNode<T>* on = node.get();
    tape.record("add", node, [an, bn, on, kind, n, cols] {
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        if (kind == detail::Broadcast::kSame) {
          for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) bn->grad[i % cols] += on->grad[i];
        }
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Elementwise a * b, with the same broadcasting rule as add.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto kind = detail::broadcast_kind(a, b, "mul");
  const std::size_t n = a.numel(), cols = a.cols();
  std::vector<T> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = ad[i] * bd[kind == detail::Broadcast::kSame ? i : i % cols];
  }
  auto node = detail::make_node<T>(a.shape(), std::move(out), "mul");
  if (tape.tracks(a, b)) {
    auto an = a.node(), bn = b.node();
    TensorNode<T>* on = node.get();
    tape.record("mul", node, [an, bn, on, kind, n, cols] {
      const bool same = kind == detail::Broadcast::kSame;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->data[same ? i : i % cols];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) bn->grad[same ? i : i % cols] += on->grad[i] * an->data[i];
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  auto node = detail::make_node<T>(a.shape(), std::move(out), "scale");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record("scale", node, [an, on, factor] {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += factor * on->grad[i];
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Sum of all elements, as a scalar.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  auto node = detail::make_node<T>(Shape{}, std::vector<T>{acc}, "sum");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record("sum", node, [an, on] {
      an->ensure_grad();
      for (T& g : an->grad) g += on->grad[0];
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Same data under a new shape with an equal element count.
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto node = detail::make_node<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()),
                                   "reshape");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record("reshape", node, [an, on] {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Exact GeLU, x * Phi(x).
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * ad[i] * (T(1) + std::erf(ad[i] * inv_sqrt2));
  }
  auto node = detail::make_node<T>(a.shape(), std::move(out), "gelu");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record("gelu", node, [an, on] {
      constexpr T inv_sqrt2pi = T(0.39894228040143267794);
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const T x = an->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        an->grad[i] += on->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Softmax over the last axis.
template <typename T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ad.data() + r * cols;
    T* y = out.data() + r * cols;
    T mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  auto node = detail::make_node<T>(a.shape(), std::move(out), "softmax_rows");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record("softmax_rows", node, [an, on, rows, cols] {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->data.data() + r * cols;
        const T* g = on->grad.data() + r * cols;
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        T* dx = an->grad.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dx[c] += y[c] * (g[c] - dot);
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Log-softmax over the last axis.
template <typename T>
Tensor<T> log_softmax_rows(Tape<T>& tape, const Tensor<T>& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(a.numel());
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = ad.data() + r * cols;
    T* y = out.data() + r * cols;
    T mx = x[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - lse;
  }
  auto node = detail::make_node<T>(a.shape(), std::move(out), "log_softmax_rows");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record("log_softmax_rows", node, [an, on, rows, cols] {
      an->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->data.data() + r * cols;
        const T* g = on->grad.data() + r * cols;
        T gsum = T(0);
        for (std::size_t c = 0; c < cols; ++c) gsum += g[c];
        T* dx = an->grad.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dx[c] += g[c] - std::exp(y[c]) * gsum;
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

inline constexpr double kLayerNormEps = 1e-5;

/// Layer normalization over the last axis with learnable gain and bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(kLayerNormEps)) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gain.numel() != cols || bias.numel() != cols) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(cols) + " elements");
  }
  std::vector<T> out(x.numel());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * cols;
    T mean = T(0);
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= T(cols);
    T var = T(0);
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const T h = (xr[c] - mean) * rs;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = h * gd[c] + bd[c];
    }
  }
  auto node = detail::make_node<T>(x.shape(), std::move(out), "layer_norm");
  if (tape.tracks(x, gain, bias)) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    TensorNode<T>* on = node.get();
    tape.record("layer_norm", node, [xn, gn, bn, on, xhat, rstd, rows, cols] {
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* g = on->grad.data() + r * cols;
        const T* h = xhat->data() + r * cols;
        if (gn->requires_grad) {
          for (std::size_t c = 0; c < cols; ++c) gn->grad[c] += g[c] * h[c];
        }
        if (bn->requires_grad) {
          for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += g[c];
        }
        if (xn->requires_grad) {
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::size_t c = 0; c < cols; ++c) {
            const T dh = g[c] * gn->data[c];
            mean_dh += dh;
            mean_dh_h += dh * h[c];
          }
          mean_dh /= T(cols);
          mean_dh_h /= T(cols);
          T* dx = xn->grad.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) {
            dx[c] += (*rstd)[r] * (g[c] * gn->data[c] - mean_dh - h[c] * mean_dh_h);
          }
        }
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Inverted dropout: kept units are scaled by 1/(1-rate) at train time, so
/// evaluation is the identity. Returns `x` itself when inactive.
template <typename T, typename RngT>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, RngT& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const T keep_scale = T(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;
    out[i] = xd[i] * (*mask)[i];
  }
  auto node = detail::make_node<T>(x.shape(), std::move(out), "dropout");
  if (tape.tracks(x)) {
    auto xn = x.node();
    TensorNode<T>* on = node.get();
    tape.record("dropout", node, [xn, on, mask] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * (*mask)[i];
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

// ---------------------------------------------------------------------------
// Indexing

/// Rows of `table` [V x H] selected by `ids`, giving [ids.size() x H].
template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::size_t> ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  std::vector<T> out(ids.size() * width);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " >= table size " +
                          std::to_string(vocab));
    }
    std::copy_n(td.data() + ids[i] * width, width, out.data() + i * width);
  }
  auto node = detail::make_node<T>({ids.size(), width}, std::move(out), "embedding");
  if (tape.tracks(table)) {
    auto tn = table.node();
    TensorNode<T>* on = node.get();
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    tape.record("embedding", node, [tn, on, idx = std::move(idx), width] {
      tn->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = tn->grad.data() + idx[i] * width;
        const T* src = on->grad.data() + i * width;
        for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Flat-indexed elements of `a`, as a vector.
template <typename T>
Tensor<T> pick(Tape<T>& tape, const Tensor<T>& a, std::span<const std::size_t> flat_index) {
  std::vector<T> out(flat_index.size());
  const auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (flat_index[i] >= ad.size()) throw ContractError("pick: index out of range");
    out[i] = ad[flat_index[i]];
  }
  auto node = detail::make_node<T>({out.size()}, std::move(out), "pick");
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    std::vector<std::size_t> idx(flat_index.begin(), flat_index.end());
    tape.record("pick", node, [an, on, idx = std::move(idx)] {
      an->ensure_grad();
      for (std::size_t i = 0; i < idx.size(); ++i) an->grad[idx[i]] += on->grad[i];
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Stacks single-element tensors into a vector.
template <typename T>
Tensor<T> stack_scalars(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  std::vector<T> out;
  out.reserve(parts.size());
  bool track = false;
  for (const auto& p : parts) {
    out.push_back(p.item());
    track = track || tape.tracks(p);
  }
  auto node = detail::make_node<T>({out.size()}, std::move(out), "stack_scalars");
  if (track) {
    std::vector<typename Tensor<T>::NodePtr> ins;
    for (const auto& p : parts) ins.push_back(p.node());
    TensorNode<T>* on = node.get();
    tape.record("stack_scalars", node, [ins = std::move(ins), on] {
      for (std::size_t i = 0; i < ins.size(); ++i) {
        if (!ins[i]->requires_grad) continue;
        ins[i]->ensure_grad();
        ins[i]->grad[0] += on->grad[i];
      }
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

// ---------------------------------------------------------------------------
// Losses

/// Mean token cross-entropy over rows whose mask entry is true.
///
/// With label_smoothing = eps the per-row loss is
/// (1 - eps) * NLL(target) + eps * mean_v(-log p_v).
template <typename T>
Tensor<T> cross_entropy_with_logits(Tape<T>& tape, const Tensor<T>& logits,
                                    std::span<const std::size_t> targets, const std::vector<bool>& loss_mask,
                                    double label_smoothing = 0.0) {
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows || loss_mask.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                         std::to_string(targets.size()) + " targets / " +
                         std::to_string(loss_mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!loss_mask[r]) continue;
    ++count;
    if (targets[r] >= vocab) {
      throw ContractError("cross_entropy: target " + std::to_string(targets[r]) + " >= vocab " +
                          std::to_string(vocab));
    }
  }
  if (count == 0) throw DegenerateInputError("cross_entropy: loss mask selects no positions");

  const T eps = T(label_smoothing);
  const auto ld = logits.data();
  auto probs = std::make_shared<std::vector<T>>(logits.numel(), T(0));
  T total = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!loss_mask[r]) continue;
    const T* x = ld.data() + r * vocab;
    T mx = x[0];
    for (std::size_t c = 1; c < vocab; ++c) mx = std::max(mx, x[c]);
    T z = T(0);
    T mean_x = T(0);
    T* p = probs->data() + r * vocab;
    for (std::size_t c = 0; c < vocab; ++c) {
      p[c] = std::exp(x[c] - mx);
      z += p[c];
      mean_x += x[c];
    }
    mean_x /= T(vocab);
    for (std::size_t c = 0; c < vocab; ++c) p[c] /= z;
    const T lse = mx + std::log(z);
    total += (T(1) - eps) * (lse - x[targets[r]]) + eps * (lse - mean_x);
  }
  const T inv_count = T(1) / T(count);
  auto node = detail::make_node<T>(Shape{}, std::vector<T>{total * inv_count}, "cross_entropy");
  if (tape.tracks(logits)) {
    auto ln = logits.node();
    TensorNode<T>* on = node.get();
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    std::vector<bool> mask = loss_mask;
    tape.record("cross_entropy", node,
                [ln, on, probs, tgt = std::move(tgt), mask = std::move(mask), rows, vocab, eps, inv_count] {
                  ln->ensure_grad();
                  const T g = on->grad[0] * inv_count;
                  const T uniform = eps / T(vocab);
                  for (std::size_t r = 0; r < rows; ++r) {
                    if (!mask[r]) continue;
                    const T* p = probs->data() + r * vocab;
                    T* dx = ln->grad.data() + r * vocab;
                    for (std::size_t c = 0; c < vocab; ++c) dx[c] += g * (p[c] - uniform);
                    dx[tgt[r]] -= g * (T(1) - eps);
                  }
                });
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Convenience overload: every row counts.
template <typename T>
Tensor<T> cross_entropy_with_logits(Tape<T>& tape, const Tensor<T>& logits,
                                    std::span<const std::size_t> targets) {
  return cross_entropy_with_logits(tape, logits, targets, std::vector<bool>(targets.size(), true));
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over a padded batch.
///
/// q, k, v are [batch*seq x hidden]. `allowed[b]` is a row-major seq x seq
/// visibility matrix (nonzero = query may attend to key). Disallowed scores
/// get an additive -1e9 before the softmax, which underflows to an exact zero
/// probability. If `probs_out` is given it receives the pre-dropout
/// probabilities, [batch][head][seq*seq].
template <typename T, typename RngT>
Tensor<T> multihead_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              std::size_t batch, std::size_t seq, std::size_t heads,
                              const std::vector<std::vector<unsigned char>>& allowed, double dropout_rate,
                              RngT& rng, bool train,
                              std::vector<std::vector<std::vector<T>>>* probs_out = nullptr) {
  const std::size_t hidden = q.cols();
  if (q.shape() != Shape{batch * seq, hidden} || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q/k/v must all be [" + std::to_string(batch * seq) + "x" +
                         std::to_string(hidden) + "]");
  }
  if (hidden % heads != 0) throw DimensionError("attention: hidden not divisible by heads");
  if (allowed.size() != batch) throw DimensionError("attention: one mask per batch item required");
  for (const auto& m : allowed) {
    if (m.size() != seq * seq) throw DimensionError("attention: mask must be seq x seq");
  }
  const std::size_t hd = hidden / heads;
  const T scale_factor = T(1) / std::sqrt(T(hd));
  constexpr T kMasked = T(-1e9);
  const bool use_dropout = train && dropout_rate > 0.0;
  const T keep_scale = use_dropout ? T(1.0 / (1.0 - dropout_rate)) : T(1);

  // probs[b*heads + h] : seq x seq, pre-dropout; dropped[...] : post-dropout
  auto probs = std::make_shared<std::vector<std::vector<T>>>(batch * heads);
  auto dropped = std::make_shared<std::vector<std::vector<T>>>();
  if (use_dropout) dropped->resize(batch * heads);

  const auto qd = q.data();
  const auto kd = k.data();
  const auto vd = v.data();
  std::vector<T> out(batch * seq * hidden, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const unsigned char* mask = allowed[b].data();
    for (std::size_t h = 0; h < heads; ++h) {
      auto& p = (*probs)[b * heads + h];
      p.assign(seq * seq, T(0));
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qd.data() + (b * seq + i) * hidden + h * hd;
        T* row = p.data() + i * seq;
        T mx = kMasked;
        for (std::size_t j = 0; j < seq; ++j) {
          const T* kj = kd.data() + (b * seq + j) * hidden + h * hd;
          T s = T(0);
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          s *= scale_factor;
          if (!mask[i * seq + j]) s += kMasked;
          row[j] = s;
          mx = std::max(mx, s);
        }
        T z = T(0);
        for (std::size_t j = 0; j < seq; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < seq; ++j) row[j] /= z;
      }
      const std::vector<T>* used = &p;
      if (use_dropout) {
        auto& d = (*dropped)[b * heads + h];
        d.resize(seq * seq);
        for (std::size_t i = 0; i < seq * seq; ++i) {
          d[i] = rng.uniform() < dropout_rate ? T(0) : p[i] * keep_scale;
        }
        used = &d;
      }
      for (std::size_t i = 0; i < seq; ++i) {
        T* oi = out.data() + (b * seq + i) * hidden + h * hd;
        const T* row = used->data() + i * seq;
        for (std::size_t j = 0; j < seq; ++j) {
          const T pij = row[j];
          if (pij == T(0)) continue;
          const T* vj = vd.data() + (b * seq + j) * hidden + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  if (probs_out != nullptr) {
    probs_out->assign(batch, std::vector<std::vector<T>>(heads));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) (*probs_out)[b][h] = (*probs)[b * heads + h];
    }
  }
  auto node = detail::make_node<T>({batch * seq, hidden}, std::move(out), "attention");
  if (tape.tracks(q, k, v)) {
    auto qn = q.node(), kn = k.node(), vn = v.node();
    TensorNode<T>* on = node.get();
    tape.record("attention", node,
                [qn, kn, vn, on, probs, dropped, batch, seq, heads, hd, hidden, scale_factor, use_dropout,
                 keep_scale] {
                  qn->ensure_grad();
                  kn->ensure_grad();
                  vn->ensure_grad();
                  std::vector<T> dp(seq * seq);
                  for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t h = 0; h < heads; ++h) {
                      const auto& p = (*probs)[b * heads + h];
                      const auto& used = use_dropout ? (*dropped)[b * heads + h] : p;
                      // dV += P^T dO ; dP = dO V^T
                      for (std::size_t i = 0; i < seq; ++i) {
                        const T* go = on->grad.data() + (b * seq + i) * hidden + h * hd;
                        for (std::size_t j = 0; j < seq; ++j) {
                          const T* vj = vn->data.data() + (b * seq + j) * hidden + h * hd;
                          T acc = T(0);
                          for (std::size_t c = 0; c < hd; ++c) acc += go[c] * vj[c];
                          dp[i * seq + j] = acc;
                          const T pij = used[i * seq + j];
                          if (pij != T(0)) {
                            T* dv = vn->grad.data() + (b * seq + j) * hidden + h * hd;
                            for (std::size_t c = 0; c < hd; ++c) dv[c] += pij * go[c];
                          }
                        }
                      }
                      // back through dropout and softmax
                      for (std::size_t i = 0; i < seq; ++i) {
                        T* dpr = dp.data() + i * seq;
                        const T* pr = p.data() + i * seq;
                        if (use_dropout) {
                          const T* ur = used.data() + i * seq;
                          for (std::size_t j = 0; j < seq; ++j) dpr[j] = ur[j] == T(0) ? T(0) : dpr[j] * keep_scale;
                        }
                        T dot = T(0);
                        for (std::size_t j = 0; j < seq; ++j) dot += dpr[j] * pr[j];
                        for (std::size_t j = 0; j < seq; ++j) dpr[j] = pr[j] * (dpr[j] - dot) * scale_factor;
                      }
                      // dQ += dS K ; dK += dS^T Q
                      for (std::size_t i = 0; i < seq; ++i) {
                        T* dq = qn->grad.data() + (b * seq + i) * hidden + h * hd;
                        const T* qi = qn->data.data() + (b * seq + i) * hidden + h * hd;
                        for (std::size_t j = 0; j < seq; ++j) {
                          const T ds = dp[i * seq + j];
                          if (ds == T(0)) continue;
                          const T* kj = kn->data.data() + (b * seq + j) * hidden + h * hd;
                          T* dk = kn->grad.data() + (b * seq + j) * hidden + h * hd;
                          for (std::size_t c = 0; c < hd; ++c) {
                            dq[c] += ds * kj[c];
                            dk[c] += ds * qi[c];
                          }
                        }
                      }
                    }
                  }
                });
  }
  return Tensor<T>::from_node(std::move(node));
}

// ---------------------------------------------------------------------------

/// Elementwise operation with caller-supplied forward and derivative. Test
/// code uses it to build deliberately broken rules for negative controls.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary_op(Tape<T>& tape, const Tensor<T>& a, Fwd forward, Deriv derivative,
                   std::string_view name = "unary_op") {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(a[i]);
  auto node = detail::make_node<T>(a.shape(), std::move(out), name);
  if (tape.tracks(a)) {
    auto an = a.node();
    TensorNode<T>* on = node.get();
    tape.record(name, node, [an, on, derivative] {
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * derivative(an->data[i]);
    });
  }
  return Tensor<T>::from_node(std::move(node));
}

}  // namespace blankfill
