/*
 * Copyright (c) 2026, The rplm Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every operation that consumes a gradient-tracked tensor records its inputs
// and a backward rule on the result node. Tensor::backward() orders the
// reachable nodes topologically and runs the rules in reverse. Graphs are
// owned by the tensors that reference them and vanish with them.
//
// Tensor<float> is the training precision; Tensor<double> exists for
// gradient checking.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rplm/errors.hpp"
#include "rplm/random.hpp"

namespace rplm {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the grads of `inputs`.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  Node& input(std::size_t i) { return *inputs[i]; }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape dims, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (numel(dims) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(dims));
    }
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(dims));
    }
    node_->dims = std::move(dims);
    node_->data = std::move(data);
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape dims, bool requires_grad = false) {
    const std::size_t count = numel(dims);
    return Tensor(std::move(dims), std::vector<T>(count, T(0)), requires_grad);
  }
  static Tensor filled(Shape dims, T value, bool requires_grad = false) {
    const std::size_t count = numel(dims);
    return Tensor(std::move(dims), std::vector<T>(count, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }
  static Tensor vector(std::initializer_list<T> values, bool requires_grad = false) {
    return Tensor(Shape{values.size()}, std::vector<T>(values), requires_grad);
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(data), requires_grad);
  }
  static Tensor uniform(Shape dims, T lo, T hi, Rng& rng, bool requires_grad = false) {
    std::vector<T> data(numel(dims));
    for (auto& v : data) v = static_cast<T>(rng.uniform(lo, hi));
    return Tensor(std::move(dims), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t dim(std::size_t i) const { return node_->dims.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * node_->dims.back() + c]; }

  /// Gradient buffer; empty span when the tensor is not tracked or backward
  /// has not reached it yet.
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
      node_->ensure_grad();
    } else {
      node_->grad.clear();
    }
  }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(dims()));
    return node_->data[0];
  }

  /// Untracked copy of the values.
  Tensor detach() const { return Tensor(dims(), node_->data, false); }

  template <typename U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(dims(), std::move(out), requires_grad);
  }

  /// Populates grad on every tracked tensor reachable from this scalar.
  /// Leaf gradients accumulate across calls; intermediate gradients are
  /// recomputed from scratch each call.
  void backward() const;

  const NodePtr& node() const { return node_; }
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

 private:
  NodePtr node_;
};

namespace detail {

inline thread_local bool grad_enabled = true;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

template <typename T>
Tensor<T> make_result(Shape dims, std::vector<T> data,
                      std::initializer_list<std::reference_wrapper<const Tensor<T>>> inputs,
                      BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  bool tracked = false;
  if (grad_enabled) {
    for (const Tensor<T>& in : inputs) tracked = tracked || in.requires_grad();
  }
  if (tracked) {
    node->requires_grad = true;
    for (const Tensor<T>& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result_n(Shape dims, std::vector<T> data, const std::vector<Tensor<T>>& inputs,
                        BackwardFn<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->dims = std::move(dims);
  node->data = std::move(data);
  bool tracked = false;
  if (grad_enabled) {
    for (const auto& in : inputs) tracked = tracked || in.requires_grad();
  }
  if (tracked) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.dims()));
  }
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
void Tensor<T>::backward() const {
  using detail::Node;
  if (size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(dims()));
  }
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) {
    if (n->backward) {
      n->grad.assign(n->data.size(), T(0));
    } else {
      n->ensure_grad();
    }
  }
  node_->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Matrix product

namespace detail {

// Offsets of each broadcast batch element into a and b.
struct BatchPlan {
  Shape batch;
  std::vector<std::size_t> a_index, b_index;
};

inline BatchPlan plan_batches(const Shape& a_batch, const Shape& b_batch) {
  const std::size_t rank = std::max(a_batch.size(), b_batch.size());
  Shape a(rank, 1), b(rank, 1), out(rank, 1);
  std::copy(a_batch.begin(), a_batch.end(), a.begin() + (rank - a_batch.size()));
  std::copy(b_batch.begin(), b_batch.end(), b.begin() + (rank - b_batch.size()));
  for (std::size_t i = 0; i < rank; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) throw ShapeError("batch dims not broadcastable");
    out[i] = std::max(a[i], b[i]);
  }
  BatchPlan plan;
  plan.batch = out;
  const std::size_t total = numel(out);
  plan.a_index.resize(total);
  plan.b_index.resize(total);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat, ai = 0, bi = 0, a_stride = 1, b_stride = 1;
    for (std::size_t d = rank; d-- > 0;) {
      const std::size_t coord = rem % out[d];
      rem /= out[d];
      if (a[d] != 1) ai += coord * a_stride;
      if (b[d] != 1) bi += coord * b_stride;
      a_stride *= a[d];
      b_stride *= b[d];
    }
    plan.a_index[flat] = ai;
    plan.b_index[flat] = bi;
  }
  return plan;
}

// c[p,r] += a[p,q] * b[q,r]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    T* crow = c + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const T av = a[i * q + k];
      if (av == T(0)) continue;
      const T* brow = b + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[p,q] += g[p,r] * b[q,r]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t p, std::size_t q, std::size_t r) {
  std::vector<T> bt(r * q);
  for (std::size_t k = 0; k < q; ++k)
    for (std::size_t j = 0; j < r; ++j) bt[j * q + k] = b[k * r + j];
  gemm_nn(g, bt.data(), c, p, r, q);
}

// c[q,r] += a[p,q]^T * g[p,r]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t p, std::size_t q, std::size_t r) {
  for (std::size_t i = 0; i < p; ++i) {
    const T* grow = g + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const T av = a[i * q + k];
      if (av == T(0)) continue;
      T* crow = c + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += av * grow[j];
    }
  }
}

}  // namespace detail

/// a[..., p, q] x b[..., q, r] with numpy-style broadcasting of the leading
/// batch dimensions.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dims()[a.rank() - 1] != b.dims()[b.rank() - 2]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.dims()) + " and " +
                     shape_str(b.dims()));
  }
  const std::size_t p = a.dims()[a.rank() - 2];
  const std::size_t q = a.dims()[a.rank() - 1];
  const std::size_t r = b.dims()[b.rank() - 1];
  Shape a_batch(a.dims().begin(), a.dims().end() - 2);
  Shape b_batch(b.dims().begin(), b.dims().end() - 2);
  detail::BatchPlan plan;
  try {
    plan = detail::plan_batches(a_batch, b_batch);
  } catch (const ShapeError&) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.dims()) + " and " +
                     shape_str(b.dims()));
  }
  Shape out_dims = plan.batch;
  out_dims.push_back(p);
  out_dims.push_back(r);
  std::vector<T> out(numel(out_dims), T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < plan.a_index.size(); ++i) {
    detail::gemm_nn(ad + plan.a_index[i] * p * q, bd + plan.b_index[i] * q * r,
                    out.data() + i * p * r, p, q, r);
  }
  return detail::make_result<T>(std::move(out_dims), std::move(out), {a, b},
                                [plan, p, q, r](detail::Node<T>& self) {
                                  auto& na = self.input(0);
                                  auto& nb = self.input(1);
                                  const T* g = self.grad.data();
                                  for (std::size_t i = 0; i < plan.a_index.size(); ++i) {
                                    const T* gi = g + i * p * r;
                                    if (na.requires_grad) {
                                      na.ensure_grad();
                                      detail::gemm_nt(gi, nb.data.data() + plan.b_index[i] * q * r,
                                                      na.grad.data() + plan.a_index[i] * p * q, p,
                                                      q, r);
                                    }
                                    if (nb.requires_grad) {
                                      nb.ensure_grad();
                                      detail::gemm_tn(na.data.data() + plan.a_index[i] * p * q, gi,
                                                      nb.grad.data() + plan.b_index[i] * q * r, p,
                                                      q, r);
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  return detail::make_result<T>({c, r}, std::move(out), {x}, [r, c](detail::Node<T>& self) {
    auto& in = self.input(0);
    in.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) in.grad[i * c + j] += self.grad[j * r + i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Index into b for every element of a, where b broadcasts against a
// (right-aligned, each b dim equal to a's or 1).
inline std::vector<std::size_t> broadcast_index(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " to " +
                     shape_str(a));
  }
  const std::size_t offset = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != a[offset + i] && b[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " to " +
                       shape_str(a));
    }
  }
  const std::size_t total = numel(a);
  std::vector<std::size_t> index(total);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t rem = flat, bi = 0, stride = 1;
    for (std::size_t d = a.size(); d-- > offset;) {
      const std::size_t coord = rem % a[d];
      rem /= a[d];
      const std::size_t bd = b[d - offset];
      if (bd != 1) bi += coord * stride;
      stride *= bd;
    }
    index[flat] = bi;
  }
  return index;
}

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, DA da,
                 DB db) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  if (a.dims() == b.dims()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i]);
    return make_result<T>(a.dims(), std::move(out), {a, b}, [n, da, db](Node<T>& self) {
      auto& na = self.input(0);
      auto& nb = self.input(1);
      if (na.requires_grad) {
        na.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          na.grad[i] += self.grad[i] * da(na.data[i], nb.data[i]);
      }
      if (nb.requires_grad) {
        nb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
          nb.grad[i] += self.grad[i] * db(na.data[i], nb.data[i]);
      }
    });
  }
  auto index = broadcast_index(a.dims(), b.dims(), name);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[index[i]]);
  return make_result<T>(
      a.dims(), std::move(out), {a, b},
      [n, index = std::move(index), da, db](Node<T>& self) {
        auto& na = self.input(0);
        auto& nb = self.input(1);
        if (na.requires_grad) {
          na.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            na.grad[i] += self.grad[i] * da(na.data[i], nb.data[index[i]]);
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            nb.grad[index[i]] += self.grad[i] * db(na.data[i], nb.data[index[i]]);
        }
      });
}

// y = f(x), dy/dx expressed through (x, y).
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, Fwd fwd, Deriv deriv) {
  const std::size_t n = x.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(x.data()[i]);
  return make_result<T>(x.dims(), std::move(out), {x}, [n, deriv](Node<T>& self) {
    auto& in = self.input(0);
    in.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      in.grad[i] += self.grad[i] * deriv(in.data[i], self.data[i]);
  });
}

}  // namespace detail

/// a + b; b may broadcast over a's leading dimensions.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

/// Elementwise (Hadamard) product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary(
      x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

/// GELU, tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return detail::unary(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); },
      [](T v, T) {
        const T th = std::tanh(c * (v + k * v * v * v));
        return T(0.5) * (T(1) + th) +
               T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
      });
}

/// max(x, floor); no gradient flows through clamped entries.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor) {
  return detail::unary(
      x, [floor](T v) { return v < floor ? floor : v; },
      [floor](T v, T) { return v < floor ? T(0) : T(1); });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return detail::make_result<T>(Shape{}, {acc}, {x}, [](detail::Node<T>& self) {
    auto& in = self.input(0);
    in.ensure_grad();
    for (auto& g : in.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// [h, a, b] -> [a, b], average over the leading dimension.
template <typename T>
Tensor<T> mean_dim0(const Tensor<T>& x) {
  detail::require_rank(x, 3, "mean_dim0");
  const std::size_t h = x.dim(0), block = x.dim(1) * x.dim(2);
  std::vector<T> out(block, T(0));
  const T inv = T(1) / static_cast<T>(h);
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t i = 0; i < block; ++i) out[i] += x.data()[k * block + i] * inv;
  return detail::make_result<T>({x.dim(1), x.dim(2)}, std::move(out), {x},
                                [h, block, inv](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t k = 0; k < h; ++k)
                                    for (std::size_t i = 0; i < block; ++i)
                                      in.grad[k * block + i] += self.grad[i] * inv;
                                });
}

/// Column-wise max over the rows of a matrix: [r, c] -> [c]. The gradient
/// goes to the first row attaining the max.
template <typename T>
Tensor<T> max_rows(const Tensor<T>& x) {
  detail::require_rank(x, 2, "max_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<T> out(c);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    out[j] = x.data()[j];
    for (std::size_t i = 1; i < r; ++i) {
      if (x.data()[i * c + j] > out[j]) {
        out[j] = x.data()[i * c + j];
        arg[j] = i;
      }
    }
  }
  return detail::make_result<T>({c}, std::move(out), {x},
                                [c, arg = std::move(arg)](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t j = 0; j < c; ++j)
                                    in.grad[arg[j] * c + j] += self.grad[j];
                                });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last dimension, max-subtracted.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: scalar input");
  const std::size_t width = x.dims().back();
  const std::size_t rows = x.size() / width;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * width;
    T* o = out.data() + r * width;
    const T mx = *std::max_element(in, in + width);
    T total = T(0);
    for (std::size_t j = 0; j < width; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < width; ++j) o[j] /= total;
  }
  return detail::make_result<T>(x.dims(), std::move(out), {x},
                                [rows, width](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * width;
                                    const T* g = self.grad.data() + r * width;
                                    T dot = T(0);
                                    for (std::size_t j = 0; j < width; ++j) dot += g[j] * y[j];
                                    T* gi = in.grad.data() + r * width;
                                    for (std::size_t j = 0; j < width; ++j)
                                      gi[j] += y[j] * (g[j] - dot);
                                  }
                                });
}

/// log-softmax over the last dimension via log-sum-exp.
template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax_lastdim: scalar input");
  const std::size_t width = x.dims().back();
  const std::size_t rows = x.size() / width;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * width;
    T* o = out.data() + r * width;
    const T mx = *std::max_element(in, in + width);
    T total = T(0);
    for (std::size_t j = 0; j < width; ++j) total += std::exp(in[j] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t j = 0; j < width; ++j) o[j] = in[j] - lse;
  }
  return detail::make_result<T>(x.dims(), std::move(out), {x},
                                [rows, width](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * width;
                                    const T* g = self.grad.data() + r * width;
                                    T total = T(0);
                                    for (std::size_t j = 0; j < width; ++j) total += g[j];
                                    T* gi = in.grad.data() + r * width;
                                    for (std::size_t j = 0; j < width; ++j)
                                      gi[j] += g[j] - std::exp(y[j]) * total;
                                  }
                                });
}

/// Per-row standardization over the last dimension followed by gain * x + bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be positive");
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t width = x.dims().back();
  if (gain.size() != width || bias.size() != width) {
    throw ShapeError("layer_norm: gain/bias length must equal last dimension " +
                     std::to_string(width) + ", got " + shape_str(gain.dims()) + " and " +
                     shape_str(bias.dims()));
  }
  const std::size_t rows = x.size() / width;
  std::vector<T> out(x.size()), normalized(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * width;
    T mu = T(0);
    for (std::size_t j = 0; j < width; ++j) mu += in[j];
    mu /= static_cast<T>(width);
    T var = T(0);
    for (std::size_t j = 0; j < width; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(width);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const T xh = (in[j] - mu) * inv_std[r];
      normalized[r * width + j] = xh;
      out[r * width + j] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  return detail::make_result<T>(
      x.dims(), std::move(out), {x, gain, bias},
      [rows, width, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](detail::Node<T>& self) {
        auto& nx = self.input(0);
        auto& ng = self.input(1);
        auto& nb = self.input(2);
        if (ng.requires_grad) ng.ensure_grad();
        if (nb.requires_grad) nb.ensure_grad();
        if (nx.requires_grad) nx.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* g = self.grad.data() + r * width;
          const T* xh = normalized.data() + r * width;
          T mean_d = T(0), mean_dx = T(0);
          for (std::size_t j = 0; j < width; ++j) {
            if (ng.requires_grad) ng.grad[j] += g[j] * xh[j];
            if (nb.requires_grad) nb.grad[j] += g[j];
            const T d = g[j] * ng.data[j];
            mean_d += d;
            mean_dx += d * xh[j];
          }
          if (!nx.requires_grad) continue;
          mean_d /= static_cast<T>(width);
          mean_dx /= static_cast<T>(width);
          T* gi = nx.grad.data() + r * width;
          for (std::size_t j = 0; j < width; ++j)
            gi[j] += inv_std[r] * (g[j] * ng.data[j] - mean_d - xh[j] * mean_dx);
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

/// -log softmax(logits)[target] for a single logit vector, in log space.
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::size_t target) {
  const std::size_t width = logits.size();
  if (width == 0) throw ShapeError("cross_entropy_from_logits: empty logits");
  if (target >= width) {
    throw IndexError("cross_entropy_from_logits: target " + std::to_string(target) +
                     " out of range for " + std::to_string(width) + " classes");
  }
  const T* x = logits.data().data();
  const T mx = *std::max_element(x, x + width);
  T total = T(0);
  for (std::size_t j = 0; j < width; ++j) total += std::exp(x[j] - mx);
  const T lse = mx + std::log(total);
  return detail::make_result<T>(Shape{}, {lse - x[target]}, {logits},
                                [width, target, lse](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  const T g = self.grad[0];
                                  for (std::size_t j = 0; j < width; ++j)
                                    in.grad[j] += g * std::exp(in.data[j] - lse);
                                  in.grad[target] -= g;
                                });
}

/// Mean cross-entropy over the rows of logits[n, V]; rows whose target equals
/// `ignore` are left out of the mean. All rows ignored -> 0.
template <typename T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, std::span<const std::uint32_t> targets,
                             std::int64_t ignore = -1) {
  detail::require_rank(logits, 2, "cross_entropy_rows");
  const std::size_t rows = logits.dim(0), width = logits.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<std::uint32_t> tgt(targets.begin(), targets.end());
  std::vector<T> lse(rows, T(0));
  std::vector<char> active(rows, 0);
  T loss = T(0);
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (static_cast<std::int64_t>(tgt[r]) == ignore) continue;
    if (tgt[r] >= width) {
      throw IndexError("cross_entropy_rows: target " + std::to_string(tgt[r]) +
                       " out of range for " + std::to_string(width) + " classes");
    }
    const T* x = logits.data().data() + r * width;
    const T mx = *std::max_element(x, x + width);
    T total = T(0);
    for (std::size_t j = 0; j < width; ++j) total += std::exp(x[j] - mx);
    lse[r] = mx + std::log(total);
    loss += lse[r] - x[tgt[r]];
    active[r] = 1;
    ++count;
  }
  const T inv = count ? T(1) / static_cast<T>(count) : T(0);
  return detail::make_result<T>(
      Shape{}, {loss * inv}, {logits},
      [rows, width, inv, tgt = std::move(tgt), lse = std::move(lse),
       active = std::move(active)](detail::Node<T>& self) {
        auto& in = self.input(0);
        in.ensure_grad();
        const T g = self.grad[0] * inv;
        for (std::size_t r = 0; r < rows; ++r) {
          if (!active[r]) continue;
          const T* x = in.data.data() + r * width;
          T* gi = in.grad.data() + r * width;
          for (std::size_t j = 0; j < width; ++j) gi[j] += g * std::exp(x[j] - lse[r]);
          gi[tgt[r]] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Gathers rows of table[V, d] -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::uint32_t> ids) {
  detail::require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty id sequence");
  std::vector<std::uint32_t> index(ids.begin(), ids.end());
  std::vector<T> out(index.size() * width);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= vocab) {
      throw IndexError("embedding: id " + std::to_string(index[i]) + " out of range for " +
                       std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + index[i] * width, width, out.data() + i * width);
  }
  const std::size_t rows = index.size();
  return detail::make_result<T>({rows, width}, std::move(out), {table},
                                [width, index = std::move(index)](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t i = 0; i < index.size(); ++i)
                                    for (std::size_t j = 0; j < width; ++j)
                                      in.grad[index[i] * width + j] += self.grad[i * width + j];
                                });
}

/// Rows [begin, end) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  detail::require_rank(x, 2, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(x.dims()));
  }
  const std::size_t width = x.dim(1);
  std::vector<T> out(x.data().begin() + begin * width, x.data().begin() + end * width);
  return detail::make_result<T>({end - begin, width}, std::move(out), {x},
                                [begin, width](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    in.grad[begin * width + i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t width = parts.front().dims().back();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require_rank(p, 2, "concat_rows");
    if (p.dim(1) != width) throw ShapeError("concat_rows: column count mismatch");
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(rows * width);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return detail::make_result_n<T>({rows, width}, std::move(out), parts,
                                  [offsets = std::move(offsets)](detail::Node<T>& self) {
                                    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                                      auto& in = self.input(k);
                                      if (!in.requires_grad) continue;
                                      in.ensure_grad();
                                      for (std::size_t i = 0; i < in.grad.size(); ++i)
                                        in.grad[i] += self.grad[offsets[k] + i];
                                    }
                                  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape dims) {
  if (numel(dims) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.dims()) + " to " + shape_str(dims));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return detail::make_result<T>(std::move(dims), std::move(out), {x}, [](detail::Node<T>& self) {
    auto& in = self.input(0);
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

/// Inverted dropout. Identity when p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ParameterError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.size());
  for (auto& m : mask) m = rng.uniform() < p ? T(0) : keep_scale;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return detail::make_result<T>(x.dims(), std::move(out), {x},
                                [mask = std::move(mask)](detail::Node<T>& self) {
                                  auto& in = self.input(0);
                                  in.ensure_grad();
                                  for (std::size_t i = 0; i < mask.size(); ++i)
                                    in.grad[i] += self.grad[i] * mask[i];
                                });
}

// ---------------------------------------------------------------------------
// Multi-head attention, split in two differentiable stages so the weights
// themselves can carry a loss.

namespace detail {

// Columns [h * dk, (h + 1) * dk) of x[n, d] as a contiguous [n, dk] block.
template <typename T>
std::vector<T> head_block(const T* x, std::size_t n, std::size_t d, std::size_t h, std::size_t dk) {
  std::vector<T> out(n * dk);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x + i * d + h * dk, dk, out.data() + i * dk);
  return out;
}

// Transposed head block: [dk, n].
template <typename T>
std::vector<T> head_block_t(const T* x, std::size_t n, std::size_t d, std::size_t h,
                            std::size_t dk) {
  std::vector<T> out(dk * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < dk; ++c) out[c * n + i] = x[i * d + h * dk + c];
  return out;
}

template <typename T>
void add_head_block(const std::vector<T>& block, T* x, std::size_t n, std::size_t d, std::size_t h,
                    std::size_t dk) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < dk; ++c) x[i * d + h * dk + c] += block[i * dk + c];
}

}  // namespace detail

/// Scaled dot-product attention weights. q[nq, d], k[nk, d]; heads split d
/// into equal contiguous slices. allowed[i * nk + j] == 0 masks key j for
/// query i (weight exactly 0). Returns [heads, nq, nk]; a fully masked row is
/// all zeros.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads,
                            std::span<const std::uint8_t> allowed = {}) {
  detail::require_rank(q, 2, "attention_weights");
  detail::require_rank(k, 2, "attention_weights");
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || heads == 0 || d % heads != 0) {
    throw ShapeError("attention_weights: query " + shape_str(q.dims()) + ", key " +
                     shape_str(k.dims()) + ", heads " + std::to_string(heads));
  }
  if (!allowed.empty() && allowed.size() != nq * nk) {
    throw ShapeError("attention_weights: mask size mismatch");
  }
  const std::size_t dk = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
  std::vector<T> out(heads * nq * nk, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = detail::head_block(q.data().data(), nq, d, h, dk);
    const auto kt = detail::head_block_t(k.data().data(), nk, d, h, dk);
    T* scores = out.data() + h * nq * nk;
    detail::gemm_nn(qh.data(), kt.data(), scores, nq, dk, nk);
    for (std::size_t i = 0; i < nq; ++i) {
      T* row = scores + i * nk;
      const std::uint8_t* ok = allowed.empty() ? nullptr : allowed.data() + i * nk;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        if (!ok || ok[j]) mx = std::max(mx, row[j] * inv_sqrt);
      }
      if (mx == -std::numeric_limits<T>::infinity()) {
        std::fill_n(row, nk, T(0));
        continue;
      }
      T total = T(0);
      for (std::size_t j = 0; j < nk; ++j) {
        row[j] = (!ok || ok[j]) ? std::exp(row[j] * inv_sqrt - mx) : T(0);
        total += row[j];
      }
      for (std::size_t j = 0; j < nk; ++j) row[j] /= total;
    }
  }
  return detail::make_result<T>(
      {heads, nq, nk}, std::move(out), {q, k},
      [heads, nq, nk, d, dk, inv_sqrt](detail::Node<T>& self) {
        auto& nqn = self.input(0);
        auto& nkn = self.input(1);
        if (nqn.requires_grad) nqn.ensure_grad();
        if (nkn.requires_grad) nkn.ensure_grad();
        std::vector<T> dscore(nq * nk);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < nq; ++i) {
            const T* p = self.data.data() + (h * nq + i) * nk;
            const T* g = self.grad.data() + (h * nq + i) * nk;
            T dot = T(0);
            for (std::size_t j = 0; j < nk; ++j) dot += g[j] * p[j];
            T* ds = dscore.data() + i * nk;
            for (std::size_t j = 0; j < nk; ++j) ds[j] = p[j] * (g[j] - dot) * inv_sqrt;
          }
          if (nqn.requires_grad) {
            const auto kh = detail::head_block(nkn.data.data(), nk, d, h, dk);
            std::vector<T> dq(nq * dk, T(0));
            detail::gemm_nn(dscore.data(), kh.data(), dq.data(), nq, nk, dk);
            detail::add_head_block(dq, nqn.grad.data(), nq, d, h, dk);
          }
          if (nkn.requires_grad) {
            const auto qh = detail::head_block(nqn.data.data(), nq, d, h, dk);
            std::vector<T> dkh(nk * dk, T(0));
            detail::gemm_tn(dscore.data(), qh.data(), dkh.data(), nq, nk, dk);
            detail::add_head_block(dkh, nkn.grad.data(), nk, d, h, dk);
          }
        }
      });
}

/// Applies per-head weights[heads, nq, nk] to v[nk, d] -> [nq, d].
template <typename T>
Tensor<T> attention_apply(const Tensor<T>& weights, const Tensor<T>& v) {
  detail::require_rank(weights, 3, "attention_apply");
  detail::require_rank(v, 2, "attention_apply");
  const std::size_t heads = weights.dim(0), nq = weights.dim(1), nk = weights.dim(2);
  const std::size_t d = v.dim(1);
  if (v.dim(0) != nk || d % heads != 0) {
    throw ShapeError("attention_apply: weights " + shape_str(weights.dims()) + ", values " +
                     shape_str(v.dims()));
  }
  const std::size_t dk = d / heads;
  std::vector<T> out(nq * d, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    const auto vh = detail::head_block(v.data().data(), nk, d, h, dk);
    std::vector<T> oh(nq * dk, T(0));
    detail::gemm_nn(weights.data().data() + h * nq * nk, vh.data(), oh.data(), nq, nk, dk);
    detail::add_head_block(oh, out.data(), nq, d, h, dk);
  }
  return detail::make_result<T>(
      {nq, d}, std::move(out), {weights, v}, [heads, nq, nk, d, dk](detail::Node<T>& self) {
        auto& np = self.input(0);
        auto& nv = self.input(1);
        if (np.requires_grad) np.ensure_grad();
        if (nv.requires_grad) nv.ensure_grad();
        for (std::size_t h = 0; h < heads; ++h) {
          const auto gh = detail::head_block(self.grad.data(), nq, d, h, dk);
          if (np.requires_grad) {
            const auto vt = detail::head_block_t(nv.data.data(), nk, d, h, dk);
            detail::gemm_nn(gh.data(), vt.data(), np.grad.data() + h * nq * nk, nq, dk, nk);
          }
          if (nv.requires_grad) {
            std::vector<T> dv(nk * dk, T(0));
            detail::gemm_tn(np.data.data() + h * nq * nk, gh.data(), dv.data(), nq, nk, dk);
            detail::add_head_block(dv, nv.grad.data(), nk, d, h, dk);
          }
        }
      });
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace rplm
