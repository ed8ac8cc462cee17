// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tape-based reverse-mode automatic differentiation over Tensor.
//
// A Graph records every primitive as it is evaluated. Creation order is a
// topological order, so backward() walks the tape once from the back. One
// Graph belongs to one thread; separate graphs may run concurrently.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "xlnet/rng.hpp"
#include "xlnet/tensor.hpp"

namespace xlnet {

class Graph;

/// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const;
  bool valid() const { return graph != nullptr; }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  /// Leaf that accumulates a gradient during backward().
  Var variable(Tensor value) {
    value.requires_grad = true;
    return push(std::move(value), true, nullptr);
  }

  /// Leaves that read `value` in place instead of copying it. `value` must
  /// outlive the graph and stay unchanged while it is in use.
  Var constant_ref(const Tensor& value) { return push_ref(value, false); }
  Var variable_ref(const Tensor& value) { return push_ref(value, true); }

  /// Records an op result. The backward rule is kept only if some input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || nodes_[v.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::uint32_t id) const { return val(nodes_[id]); }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

  /// Gradient of the last backward() root with respect to v. Zero-filled if
  /// nothing flowed into v.
  /// Gradient of a node after backward(); zeros if nothing reached it.
  const Tensor& grad(Var v) const {
    const Node& n = nodes_[v.id];
    const Tensor& x = val(n);
    if (n.grad.numel() == x.numel() && !n.grad.empty()) return n.grad;
    if (n.zeros.shape() != x.shape()) n.zeros = Tensor(x.shape());
    return n.zeros;
  }

  /// Moves the gradient out of the graph; zeros if nothing reached it.
  Tensor take_grad(Var v) {
    Node& n = nodes_[v.id];
    const Tensor& x = val(n);
    if (n.grad.numel() == x.numel() && !n.grad.empty()) return std::move(n.grad);
    return Tensor(x.shape());
  }

  /// Upstream gradient of a node, valid inside its backward rule.
  const Tensor& upstream(std::uint32_t id) const { return nodes_[id].grad; }

  /// Gradient buffer of an input, or nullptr if the input takes no gradient.
  Tensor* sink(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.numel() != val(n).numel() || n.grad.empty()) n.grad = Tensor(val(n).shape());
    return &n.grad;
  }

  /// Backpropagates from a scalar root seeded with `seed`. Each node on the
  /// tape is visited once, in reverse creation order.
  void backward(Var root, double seed = 1.0) {
    if (value(root.id).numel() != 1) {
      throw ShapeError("backward", value(root.id).shape(), Shape{}, "root must be a scalar");
    }
    Tensor* g = sink(root.id);
    if (g == nullptr) return;
    (*g)[0] += seed;
    for (std::uint32_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    mutable Tensor zeros;
    const Tensor* external = nullptr;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(fn), Tensor(), nullptr});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  Var push_ref(const Tensor& value, bool requires_grad) {
    nodes_.push_back(Node{Tensor(), Tensor(), requires_grad, nullptr, Tensor(), &value});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  static const Tensor& val(const Node& n) { return n.external ? *n.external : n.value; }

  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline const Shape& Var::shape() const { return graph->value(id).shape(); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

inline CMap cmap(const double* p, std::size_t r, std::size_t c) {
  return CMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MMap mmap(double* p, std::size_t r, std::size_t c) {
  return MMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Graph& same_graph(const char* op, Var a, Var b) {
  if (a.graph != b.graph || a.graph == nullptr) {
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  }
  return *a.graph;
}

/// True when `small` equals the trailing dimensions of `big`.
inline bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data().data();
  const double* s = src.data().data();
  for (std::size_t i = 0, n = dst.numel(); i < n; ++i) d[i] += s[i];
}

inline std::size_t prod(const Shape& s, std::size_t b, std::size_t e) {
  std::size_t p = 1;
  for (std::size_t i = b; i < e; ++i) p *= s[i];
  return p;
}

}  // namespace detail

// ----------------------------------------------------------------- elementwise

/// a + b. `b` may match the trailing dimensions of `a` (bias broadcast).
inline Var add(Var a, Var b) {
  Graph& g = detail::same_graph("add", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!detail::is_suffix(av.shape(), bv.shape())) throw ShapeError("add", av.shape(), bv.shape());
  Tensor out(av.shape());
  const std::size_t n = av.numel(), m = bv.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % m];
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, n, m](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    if (Tensor* ga = gr.sink(ai)) detail::add_into(*ga, up);
    if (Tensor* gb = gr.sink(bi)) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[i % m] += up[i];
    }
  });
}

/// a * b elementwise, with the same trailing broadcast rule as add().
inline Var mul(Var a, Var b) {
  Graph& g = detail::same_graph("mul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!detail::is_suffix(av.shape(), bv.shape())) throw ShapeError("mul", av.shape(), bv.shape());
  Tensor out(av.shape());
  const std::size_t n = av.numel(), m = bv.numel();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % m];
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, n, m](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    const Tensor& av = gr.value(ai);
    const Tensor& bv = gr.value(bi);
    if (Tensor* ga = gr.sink(ai)) {
      for (std::size_t i = 0; i < n; ++i) (*ga)[i] += up[i] * bv[i % m];
    }
    if (Tensor* gb = gr.sink(bi)) {
      for (std::size_t i = 0; i < n; ++i) (*gb)[i % m] += up[i] * av[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  out.requires_grad = false;
  for (double& x : out.data()) x *= s;
  return g.record(std::move(out), {a}, [ai = a.id, s](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    Tensor* ga = gr.sink(ai);
    for (std::size_t i = 0; i < up.numel(); ++i) (*ga)[i] += s * up[i];
  });
}

inline Var gelu(Var a) {
  Graph& g = *a.graph;
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) {
    out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * std::numbers::sqrt2 / 2.0));
  }
  return g.record(std::move(out), {a}, [ai = a.id](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    const Tensor& x = gr.value(ai);
    Tensor* ga = gr.sink(ai);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      (*ga)[i] += up[i] * (cdf + x[i] * pdf);
    }
  });
}

inline Var tanh(Var a) {
  Graph& g = *a.graph;
  Tensor out = a.value();
  out.requires_grad = false;
  for (double& x : out.data()) x = std::tanh(x);
  return g.record(std::move(out), {a}, [ai = a.id](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    const Tensor& y = gr.value(self);
    Tensor* ga = gr.sink(ai);
    for (std::size_t i = 0; i < y.numel(); ++i) (*ga)[i] += up[i] * (1.0 - y[i] * y[i]);
  });
}

/// Inverted dropout. Identity when rate == 0.
inline Var dropout(Var a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  Graph& g = *a.graph;
  const Tensor& av = a.value();
  Tensor keep(av.shape());
  Tensor out(av.shape());
  const double s = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < av.numel(); ++i) {
    keep[i] = rng.uniform() < rate ? 0.0 : s;
    out[i] = av[i] * keep[i];
  }
  return g.record(std::move(out), {a}, [ai = a.id, keep = std::move(keep)](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    Tensor* ga = gr.sink(ai);
    for (std::size_t i = 0; i < up.numel(); ++i) (*ga)[i] += up[i] * keep[i];
  });
}

/// Copy of the value with no path back to `a`.
inline Var detach(Var a) {
  Tensor v = a.value();
  v.requires_grad = false;
  return a.graph->constant(std::move(v));
}

// ------------------------------------------------------------------ reductions

inline Var sum(Var a) {
  Graph& g = *a.graph;
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return g.record(Tensor::scalar(s), {a}, [ai = a.id](Graph& gr, std::uint32_t self) {
    const double up = gr.upstream(self)[0];
    Tensor* ga = gr.sink(ai);
    for (double& x : ga->data()) x += up;
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean", a.shape(), Shape{}, "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// -------------------------------------------------------------- linear algebra

/// [m,k] x [k,n] -> [m,n].
inline Var matmul(Var a, Var b) {
  Graph& g = detail::same_graph("matmul", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  detail::mmap(out.data().data(), m, n).noalias() =
      detail::cmap(av.data().data(), m, k) * detail::cmap(bv.data().data(), k, n);
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, m, k, n](Graph& gr, std::uint32_t self) {
    auto up = detail::cmap(gr.upstream(self).data().data(), m, n);
    if (Tensor* ga = gr.sink(ai)) {
      detail::mmap(ga->data().data(), m, k).noalias() +=
          up * detail::cmap(gr.value(bi).data().data(), k, n).transpose();
    }
    if (Tensor* gb = gr.sink(bi)) {
      detail::mmap(gb->data().data(), k, n).noalias() +=
          detail::cmap(gr.value(ai).data().data(), m, k).transpose() * up;
    }
  });
}

/// [m,k] x [n,k]^T -> [m,n].
inline Var matmul_nt(Var a, Var b) {
  Graph& g = detail::same_graph("matmul_nt", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw ShapeError("matmul_nt", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  Tensor out(Shape{m, n});
  detail::mmap(out.data().data(), m, n).noalias() =
      detail::cmap(av.data().data(), m, k) * detail::cmap(bv.data().data(), n, k).transpose();
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, m, k, n](Graph& gr, std::uint32_t self) {
    auto up = detail::cmap(gr.upstream(self).data().data(), m, n);
    if (Tensor* ga = gr.sink(ai)) {
      detail::mmap(ga->data().data(), m, k).noalias() += up * detail::cmap(gr.value(bi).data().data(), n, k);
    }
    if (Tensor* gb = gr.sink(bi)) {
      detail::mmap(gb->data().data(), n, k).noalias() +=
          up.transpose() * detail::cmap(gr.value(ai).data().data(), m, k);
    }
  });
}

/// Batched [B,m,k] x [B,k,n] -> [B,m,n].
inline Var bmm(Var a, Var b) {
  Graph& g = detail::same_graph("bmm", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
    throw ShapeError("bmm", av.shape(), bv.shape());
  }
  const std::size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  Tensor out(Shape{nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    detail::mmap(out.data().data() + i * m * n, m, n).noalias() =
        detail::cmap(av.data().data() + i * m * k, m, k) * detail::cmap(bv.data().data() + i * k * n, k, n);
  }
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, nb, m, k, n](Graph& gr, std::uint32_t self) {
    const double* up = gr.upstream(self).data().data();
    const double* ap = gr.value(ai).data().data();
    const double* bp = gr.value(bi).data().data();
    Tensor* ga = gr.sink(ai);
    Tensor* gb = gr.sink(bi);
    for (std::size_t i = 0; i < nb; ++i) {
      auto u = detail::cmap(up + i * m * n, m, n);
      if (ga) {
        detail::mmap(ga->data().data() + i * m * k, m, k).noalias() +=
            u * detail::cmap(bp + i * k * n, k, n).transpose();
      }
      if (gb) {
        detail::mmap(gb->data().data() + i * k * n, k, n).noalias() +=
            detail::cmap(ap + i * m * k, m, k).transpose() * u;
      }
    }
  });
}

/// Batched [B,m,k] x [B,n,k]^T -> [B,m,n].
inline Var bmm_nt(Var a, Var b) {
  Graph& g = detail::same_graph("bmm_nt", a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2)) {
    throw ShapeError("bmm_nt", av.shape(), bv.shape());
  }
  const std::size_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(1);
  Tensor out(Shape{nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    detail::mmap(out.data().data() + i * m * n, m, n).noalias() =
        detail::cmap(av.data().data() + i * m * k, m, k) *
        detail::cmap(bv.data().data() + i * n * k, n, k).transpose();
  }
  return g.record(std::move(out), {a, b}, [ai = a.id, bi = b.id, nb, m, k, n](Graph& gr, std::uint32_t self) {
    const double* up = gr.upstream(self).data().data();
    const double* ap = gr.value(ai).data().data();
    const double* bp = gr.value(bi).data().data();
    Tensor* ga = gr.sink(ai);
    Tensor* gb = gr.sink(bi);
    for (std::size_t i = 0; i < nb; ++i) {
      auto u = detail::cmap(up + i * m * n, m, n);
      if (ga) {
        detail::mmap(ga->data().data() + i * m * k, m, k).noalias() += u * detail::cmap(bp + i * n * k, n, k);
      }
      if (gb) {
        detail::mmap(gb->data().data() + i * n * k, n, k).noalias() +=
            u.transpose() * detail::cmap(ap + i * m * k, m, k);
      }
    }
  });
}

// ------------------------------------------------------------------- softmaxes

/// What masked_softmax does with a row whose every entry is masked.
enum class EmptyRows {
  kError,  // throw MaskError
  kZero,   // the row's probabilities are all zero
};

/// Additive large negative constant used for masked logits.
inline constexpr double kMaskedLogit = -1e30;

/// Softmax over the last axis after adding kMaskedLogit where the mask is
/// false. The mask covers the last two dimensions; leading dimensions (heads)
/// share it.
inline Var masked_softmax(Var x, const BoolMatrix& mask, EmptyRows empty = EmptyRows::kError) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.rank() < 2 || xv.dim(xv.rank() - 2) != mask.rows() || xv.dim(xv.rank() - 1) != mask.cols()) {
    throw ShapeError("masked_softmax", xv.shape(), Shape{mask.rows(), mask.cols()});
  }
  const std::size_t rows = mask.rows(), cols = mask.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    if (mask.row_count(r) == 0 && empty == EmptyRows::kError) {
      throw MaskError("masked_softmax: row " + std::to_string(r) + " is fully masked");
    }
  }
  const std::size_t blocks = xv.numel() / (rows * cols);
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = xv.data().data() + (b * rows + r) * cols;
      double* o = out.data().data() + (b * rows + r) * cols;
      if (mask.row_count(r) == 0) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cols; ++c) {
        o[c] = in[c] + (mask(r, c) ? 0.0 : kMaskedLogit);
        mx = std::max(mx, o[c]);
      }
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        o[c] = std::exp(o[c] - mx);
        z += o[c];
      }
      for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
    }
  }
  return g.record(std::move(out), {x}, [xi = x.id, cols](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    const Tensor& p = gr.value(self);
    Tensor* gx = gr.sink(xi);
    for (std::size_t off = 0; off < p.numel(); off += cols) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += up[off + c] * p[off + c];
      for (std::size_t c = 0; c < cols; ++c) (*gx)[off + c] += p[off + c] * (up[off + c] - dot);
    }
  });
}

inline Var reshape(Var x, Shape shape) {
  Graph& g = *x.graph;
  Tensor out = x.value().reshaped(std::move(shape));
  return g.record(std::move(out), {x}, [xi = x.id](Graph& gr, std::uint32_t self) {
    detail::add_into(*gr.sink(xi), gr.upstream(self));
  });
}

/// Unmasked softmax over the last axis.
inline Var softmax(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("softmax", s, Shape{}, "needs at least one axis");
  const std::size_t cols = s.back();
  const std::size_t rows = cols ? x.value().numel() / cols : 0;
  const Shape original = s;
  Var p = masked_softmax(reshape(x, Shape{rows, cols}), BoolMatrix(rows, cols, true));
  return reshape(p, original);
}

/// log(softmax(x)) over the last axis, computed stably.
inline Var log_softmax(Var x) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("log_softmax", xv.shape(), Shape{}, "needs at least one axis");
  const std::size_t cols = xv.shape().back();
  Tensor out(xv.shape());
  for (std::size_t off = 0; off < xv.numel(); off += cols) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, xv[off + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(xv[off + c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[off + c] = xv[off + c] - lz;
  }
  return g.record(std::move(out), {x}, [xi = x.id, cols](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    const Tensor& y = gr.value(self);
    Tensor* gx = gr.sink(xi);
    for (std::size_t off = 0; off < y.numel(); off += cols) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += up[off + c];
      for (std::size_t c = 0; c < cols; ++c) (*gx)[off + c] += up[off + c] - std::exp(y[off + c]) * s;
    }
  });
}

// ---------------------------------------------------------------- normalization

/// Layer normalization over the last axis with learnable gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
  Graph& g = detail::same_graph("layer_norm", x, gain);
  const Tensor& xv = x.value();
  const std::size_t d = xv.rank() ? xv.shape().back() : 0;
  if (xv.rank() == 0 || gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm", xv.shape(), gain.shape());
  }
  const std::size_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (in[c] - mu) * rstd[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  return g.record(std::move(out), {x, gain, bias},
                  [xi = x.id, gi = gain.id, bi = bias.id, d, rows, xhat = std::move(xhat),
                   rstd = std::move(rstd)](Graph& gr, std::uint32_t self) {
                    const Tensor& up = gr.upstream(self);
                    const Tensor& gv = gr.value(gi);
                    Tensor* gx = gr.sink(xi);
                    Tensor* gg = gr.sink(gi);
                    Tensor* gb = gr.sink(bi);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                      for (std::size_t c = 0; c < d; ++c) {
                        const double u = up[r * d + c];
                        const double xh = xhat[r * d + c];
                        if (gg) (*gg)[c] += u * xh;
                        if (gb) (*gb)[c] += u;
                        mean_dxh += u * gv[c];
                        mean_dxh_xh += u * gv[c] * xh;
                      }
                      if (!gx) continue;
                      mean_dxh /= static_cast<double>(d);
                      mean_dxh_xh /= static_cast<double>(d);
                      for (std::size_t c = 0; c < d; ++c) {
                        const double dxh = up[r * d + c] * gv[c];
                        (*gx)[r * d + c] += rstd[r] * (dxh - mean_dxh - xhat[r * d + c] * mean_dxh_xh);
                      }
                    }
                  });
}

// -------------------------------------------------------------- index and shape

/// Rows of `table` ([V, d]) selected by ids -> [n, d].
inline Var embedding(Var table, std::span<const int> ids) {
  Graph& g = *table.graph;
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding", tv.shape(), Shape{ids.size()});
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab));
    }
  }
  Tensor out(Shape{idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(tv.data().data() + static_cast<std::size_t>(idx[i]) * d, d, out.data().data() + i * d);
  }
  return g.record(std::move(out), {table}, [ti = table.id, d, idx = std::move(idx)](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    Tensor* gt = gr.sink(ti);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gt->data().data() + static_cast<std::size_t>(idx[i]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += up[i * d + c];
    }
  });
}

/// Leading-axis gather: out[i] = x[rows[i]]. Repeated rows accumulate.
inline Var take_rows(Var x, std::span<const std::size_t> rows) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("take_rows", xv.shape(), Shape{rows.size()});
  const std::size_t n = xv.dim(0);
  const std::size_t inner = n ? xv.numel() / n : 0;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r : idx) {
    if (r >= n) throw ShapeError("take_rows", xv.shape(), Shape{r}, "row index out of range");
  }
  Shape shape = xv.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(xv.data().data() + idx[i] * inner, inner, out.data().data() + i * inner);
  }
  return g.record(std::move(out), {x}, [xi = x.id, inner, idx = std::move(idx)](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    Tensor* gx = gr.sink(xi);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t c = 0; c < inner; ++c) (*gx)[idx[i] * inner + c] += up[i * inner + c];
    }
  });
}

/// out[..., r, c] = x[..., r, index[r * cols + c]] for x of shape [..., R, S].
/// Used to turn per-distance and per-segment-class scores into per-key scores.
inline Var gather_last(Var x, std::span<const std::uint32_t> index, std::size_t cols) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("gather_last", xv.shape(), Shape{index.size()});
  const std::size_t rows = xv.dim(xv.rank() - 2), src = xv.dim(xv.rank() - 1);
  if (index.size() != rows * cols) {
    throw ShapeError("gather_last", xv.shape(), Shape{rows, cols}, "index size");
  }
  for (std::uint32_t v : index) {
    if (v >= src) throw ShapeError("gather_last", xv.shape(), Shape{v}, "index out of range");
  }
  const std::size_t blocks = xv.numel() / (rows * src);
  Shape shape = xv.shape();
  shape.back() = cols;
  Tensor out(shape);
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* in = xv.data().data() + (b * rows + r) * src;
      double* o = out.data().data() + (b * rows + r) * cols;
      for (std::size_t c = 0; c < cols; ++c) o[c] = in[idx[r * cols + c]];
    }
  }
  return g.record(std::move(out), {x},
                  [xi = x.id, blocks, rows, src, cols, idx = std::move(idx)](Graph& gr, std::uint32_t self) {
                    const Tensor& up = gr.upstream(self);
                    Tensor* gx = gr.sink(xi);
                    for (std::size_t b = 0; b < blocks; ++b) {
                      for (std::size_t r = 0; r < rows; ++r) {
                        double* dst = gx->data().data() + (b * rows + r) * src;
                        const double* u = up.data().data() + (b * rows + r) * cols;
                        for (std::size_t c = 0; c < cols; ++c) dst[idx[r * cols + c]] += u[c];
                      }
                    }
                  });
}

/// out[i] = x[i, ids[i]] for x of shape [n, V].
inline Var pick(Var x, std::span<const int> ids) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != ids.size()) throw ShapeError("pick", xv.shape(), Shape{ids.size()});
  const std::size_t cols = xv.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor out(Shape{idx.size()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= cols) {
      throw std::out_of_range("pick: id " + std::to_string(idx[i]) + " outside " + std::to_string(cols) +
                              " classes");
    }
    out[i] = xv[i * cols + static_cast<std::size_t>(idx[i])];
  }
  return g.record(std::move(out), {x}, [xi = x.id, cols, idx = std::move(idx)](Graph& gr, std::uint32_t self) {
    const Tensor& up = gr.upstream(self);
    Tensor* gx = gr.sink(xi);
    for (std::size_t i = 0; i < idx.size(); ++i) (*gx)[i * cols + static_cast<std::size_t>(idx[i])] += up[i];
  });
}

namespace detail {

// View of a shape as [outer, a, mid, b, inner] around two axes a0 < a1.
struct SwapLayout {
  std::size_t outer, a, mid, b, inner;
};

inline SwapLayout swap_layout(const Shape& s, std::size_t a0, std::size_t a1) {
  return {prod(s, 0, a0), s[a0], prod(s, a0 + 1, a1), s[a1], prod(s, a1 + 1, s.size())};
}

inline void swap_axes_copy(const double* in, double* out, const SwapLayout& l, bool accumulate) {
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < l.a; ++i)
      for (std::size_t m = 0; m < l.mid; ++m)
        for (std::size_t j = 0; j < l.b; ++j) {
          const double* src = in + ((((o * l.a + i) * l.mid + m) * l.b + j) * l.inner);
          double* dst = out + ((((o * l.b + j) * l.mid + m) * l.a + i) * l.inner);
          if (accumulate) {
            for (std::size_t c = 0; c < l.inner; ++c) dst[c] += src[c];
          } else {
            std::copy_n(src, l.inner, dst);
          }
        }
}

}  // namespace detail

/// Swaps two axes.
inline Var transpose(Var x, std::size_t axis0, std::size_t axis1) {
  Graph& g = *x.graph;
  const Tensor& xv = x.value();
  if (axis0 == axis1 || axis0 >= xv.rank() || axis1 >= xv.rank()) {
    throw ShapeError("transpose", xv.shape(), Shape{axis0, axis1}, "invalid axes");
  }
  const std::size_t a0 = std::min(axis0, axis1), a1 = std::max(axis0, axis1);
  Shape shape = xv.shape();
  std::swap(shape[a0], shape[a1]);
  Tensor out(shape);
  const detail::SwapLayout fwd = detail::swap_layout(xv.shape(), a0, a1);
  detail::swap_axes_copy(xv.data().data(), out.data().data(), fwd, false);
  const detail::SwapLayout bwd = detail::swap_layout(shape, a0, a1);
  return g.record(std::move(out), {x}, [xi = x.id, bwd](Graph& gr, std::uint32_t self) {
    detail::swap_axes_copy(gr.upstream(self).data().data(), gr.sink(xi)->data().data(), bwd, true);
  });
}

/// Concatenation along `axis`; all other dimensions must agree.
inline Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Graph& g = *parts[0].graph;
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat", first, Shape{axis}, "axis out of range");
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    if (p.graph != &g) throw std::invalid_argument("concat: operands belong to different graphs");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw ShapeError("concat", first, s);
    lens.push_back(s[axis]);
    shape[axis] += s[axis];
  }
  const std::size_t outer = detail::prod(first, 0, axis);
  const std::size_t inner = detail::prod(first, axis + 1, first.size());
  const std::size_t total = shape[axis];
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const double* src = parts[p].value().data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * lens[p] * inner, lens[p] * inner, out.data().data() + (o * total + offset) * inner);
    }
    offset += lens[p];
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return g.record(std::move(out), parts,
                  [ids = std::move(ids), lens = std::move(lens), outer, inner, total](Graph& gr, std::uint32_t self) {
                    const double* up = gr.upstream(self).data().data();
                    std::size_t offset = 0;
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      if (Tensor* gp = gr.sink(ids[p])) {
                        for (std::size_t o = 0; o < outer; ++o) {
                          const double* src = up + (o * total + offset) * inner;
                          double* dst = gp->data().data() + o * lens[p] * inner;
                          for (std::size_t c = 0; c < lens[p] * inner; ++c) dst[c] += src[c];
                        }
                      }
                      offset += lens[p];
                    }
                  });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// x[..., begin:end, ...] along `axis`.
inline Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  Graph& g = *x.graph;
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    throw ShapeError("slice", s, Shape{axis, begin, end}, "invalid range");
  }
  const std::size_t outer = detail::prod(s, 0, axis);
  const std::size_t inner = detail::prod(s, axis + 1, s.size());
  const std::size_t len = end - begin, full = s[axis];
  Shape shape = s;
  shape[axis] = len;
  Tensor out(shape);
  const double* src = x.value().data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src + (o * full + begin) * inner, len * inner, out.data().data() + o * len * inner);
  }
  return g.record(std::move(out), {x}, [xi = x.id, outer, inner, len, full, begin](Graph& gr, std::uint32_t self) {
    const double* up = gr.upstream(self).data().data();
    double* dst = gr.sink(xi)->data().data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t c = 0; c < len * inner; ++c) dst[(o * full + begin) * inner + c] += up[o * len * inner + c];
    }
  });
}

}  // namespace xlnet
