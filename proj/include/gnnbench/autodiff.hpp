#pragma once

// Dense reverse-mode automatic differentiation over row-major matrices.
//
// A Tensor is a handle to a node of a dynamically built computation record.
// Operations on tensors that require gradients append a node holding the
// parent handles and a closure that maps the output gradient onto the
// parents. backward() walks the record from a scalar loss in reverse
// topological order, visiting each node once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace gnnbench::ad {

class Tensor;
class Gradients;

namespace detail {

struct Node;

// Hands out per-parent gradient buffers during the backward sweep.
class GradSink {
 public:
  virtual ~GradSink() = default;
  // Null when the parent does not require a gradient.
  virtual double* buffer(std::size_t parent) = 0;
};

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node& self, const double* grad_out, GradSink& sink)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(0, 0) {}

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data = {}, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (data.empty()) data.assign(rows * cols, 0.0);
    if (data.size() != rows * cols)
      throw ShapeError("tensor: " + std::to_string(data.size()) + " values for shape " + shape_string(rows, cols));
    node_->rows = rows;
    node_->cols = cols;
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor(1, 1, {v}); }
  static Tensor parameter(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor(rows, cols, std::move(data), true);
  }
  static Tensor full(std::size_t rows, std::size_t cols, double v) {
    return Tensor(rows, cols, std::vector<double>(rows * cols, v));
  }

  std::size_t rows() const noexcept { return node_->rows; }
  std::size_t cols() const noexcept { return node_->cols; }
  std::size_t size() const noexcept { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_->requires_grad; }

  std::span<const double> values() const noexcept { return node_->value; }
  const std::vector<double>& data() const noexcept { return node_->value; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  double item() const {
    if (size() != 1) throw ContractError("tensor: item() on shape " + shape());
    return node_->value[0];
  }

  // Leaf values may be overwritten in place (optimizer updates). Derived
  // nodes already recorded keep the value they were computed with only if
  // they copied it, so mutate leaves between iterations, not mid-graph.
  std::vector<double>& mutable_data() noexcept { return node_->value; }

  Tensor detach() const { return Tensor(rows(), cols(), node_->value, false); }

  std::string shape() const { return shape_string(rows(), cols()); }
  static std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
  }

  const detail::Node* id() const noexcept { return node_.get(); }

 private:
  friend Tensor make_result(std::size_t, std::size_t, std::vector<double>, std::vector<Tensor>,
                            std::function<void(const detail::Node&, const double*, detail::GradSink&)>);
  friend Gradients backward(const Tensor&);
  std::shared_ptr<detail::Node> node_;
};

// Records a result node. The closure is dropped when no input requires grad.
inline Tensor make_result(std::size_t rows, std::size_t cols, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(const detail::Node&, const double*, detail::GradSink&)> fn) {
  Tensor out(rows, cols, std::move(value));
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (any) {
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(fn);
  }
  return out;
}

// Gradient of one loss with respect to every tensor that requires grad.
class Gradients {
 public:
  // Zeros when the tensor is not connected to the loss.
  std::vector<double> of(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return std::vector<double>(t.size(), 0.0);
    return it->second;
  }
  const std::vector<double>* find(const Tensor& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }
  bool contains(const Tensor& t) const { return grads_.count(t.id()) != 0; }

 private:
  friend Gradients backward(const Tensor&);
  std::unordered_map<const detail::Node*, std::vector<double>> grads_;
};

inline Gradients backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + loss.shape());
  Gradients result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_map<const detail::Node*, bool> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{loss.node_.get(), 0}};
  visited[loss.node_.get()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited[p]) {
        visited[p] = true;
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  auto& grads = result.grads_;
  grads[loss.node_.get()] = {1.0};

  struct Sink final : detail::GradSink {
    detail::Node* node = nullptr;
    std::unordered_map<const detail::Node*, std::vector<double>>* grads = nullptr;
    double* buffer(std::size_t i) override {
      detail::Node* p = node->parents[i].get();
      if (!p->requires_grad) return nullptr;
      auto& g = (*grads)[p];
      if (g.empty()) g.assign(p->value.size(), 0.0);
      return g.data();
    }
  } sink;
  sink.grads = &grads;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward) continue;  // leaf
    auto g = grads.find(node);
    if (g == grads.end()) continue;
    sink.node = node;
    // Inserting parent entries does not move existing map values.
    node->backward(*node, g->second.data(), sink);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Shape checks

namespace detail {

inline void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) throw ShapeError(std::string(op) + ": incompatible shapes " + a.shape() + " and " + b.shape());
}

enum class Broadcast { same, row, col, scalar };

// b may be same-shape, a 1 x cols row vector, a rows x 1 column vector or 1x1.
inline Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::same;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::col;
  require(false, op, a, b);
  return Broadcast::same;
}

inline std::size_t bindex(Broadcast k, std::size_t r, std::size_t c, std::size_t cols) {
  switch (k) {
    case Broadcast::same: return r * cols + c;
    case Broadcast::row: return c;
    case Broadcast::col: return r;
    case Broadcast::scalar: return 0;
  }
  return 0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// Rows of `a` that are exactly zero in a column are skipped, which makes
// sparse binary feature matrices cheap.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require(a.cols() == b.rows(), "matmul", a, b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = A[i * k + p];
      if (x == 0.0) continue;
      const double* brow = B + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += x * brow[j];
    }
  }
  return make_result(n, m, std::move(out), {a, b}, [n, k, m](const detail::Node& self, const double* g, detail::GradSink& sink) {
    const double* A = self.parents[0]->value.data();
    const double* B = self.parents[1]->value.data();
    if (double* ga = sink.buffer(0)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B + p * m;
          const double* grow = g + i * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
          ga[i * k + p] += acc;
        }
    }
    if (double* gb = sink.buffer(1)) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = A[i * k + p];
          if (x == 0.0) continue;
          double* gbrow = gb + p * m;
          const double* grow = g + i * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += x * grow[j];
        }
    }
  });
}

// Fixed-coefficient sparse matrix in CSR form, used for neighborhood
// aggregation; the coefficients are not differentiated.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> indices;
  std::vector<double> values;
};

inline Tensor spmm(std::shared_ptr<const SparseMatrix> s, const Tensor& x) {
  if (s->cols != x.rows())
    throw ShapeError("spmm: sparse operand [" + std::to_string(s->rows) + "x" + std::to_string(s->cols) +
                     "] incompatible with " + x.shape());
  const std::size_t m = x.cols();
  std::vector<double> out(s->rows * m, 0.0);
  const double* X = x.data().data();
  for (std::size_t i = 0; i < s->rows; ++i)
    for (std::size_t e = s->offsets[i]; e < s->offsets[i + 1]; ++e) {
      const double w = s->values[e];
      const double* xr = X + s->indices[e] * m;
      double* o = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += w * xr[j];
    }
  return make_result(s->rows, m, std::move(out), {x}, [s, m](const detail::Node&, const double* g, detail::GradSink& sink) {
    double* gx = sink.buffer(0);
    if (!gx) return;
    for (std::size_t i = 0; i < s->rows; ++i)
      for (std::size_t e = s->offsets[i]; e < s->offsets[i + 1]; ++e) {
        const double w = s->values[e];
        double* gr = gx + s->indices[e] * m;
        const double* go = g + i * m;
        for (std::size_t j = 0; j < m; ++j) gr[j] += w * go[j];
      }
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with row/column/scalar broadcasting of the right operand

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind("add", a, b);
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.data()[r * C + c] + b.data()[detail::bindex(kind, r, c, C)];
  return make_result(R, C, std::move(out), {a, b}, [kind, R, C](const detail::Node&, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i = 0; i < R * C; ++i) ga[i] += g[i];
    if (double* gb = sink.buffer(1))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gb[detail::bindex(kind, r, c, C)] += g[r * C + c];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind("sub", a, b);
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.data()[r * C + c] - b.data()[detail::bindex(kind, r, c, C)];
  return make_result(R, C, std::move(out), {a, b}, [kind, R, C](const detail::Node&, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i = 0; i < R * C; ++i) ga[i] += g[i];
    if (double* gb = sink.buffer(1))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gb[detail::bindex(kind, r, c, C)] -= g[r * C + c];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind("mul", a, b);
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.data()[r * C + c] * b.data()[detail::bindex(kind, r, c, C)];
  return make_result(R, C, std::move(out), {a, b}, [kind, R, C](const detail::Node& self, const double* g, detail::GradSink& sink) {
    const double* A = self.parents[0]->value.data();
    const double* B = self.parents[1]->value.data();
    if (double* ga = sink.buffer(0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += g[r * C + c] * B[detail::bindex(kind, r, c, C)];
    if (double* gb = sink.buffer(1))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gb[detail::bindex(kind, r, c, C)] += g[r * C + c] * A[r * C + c];
  });
}

// Elementwise quotient; only used with strictly positive denominators.
inline Tensor div(const Tensor& a, const Tensor& b) {
  const auto kind = detail::broadcast_kind("div", a, b);
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a.data()[r * C + c] / b.data()[detail::bindex(kind, r, c, C)];
  return make_result(R, C, std::move(out), {a, b}, [kind, R, C](const detail::Node& self, const double* g, detail::GradSink& sink) {
    const double* A = self.parents[0]->value.data();
    const double* B = self.parents[1]->value.data();
    if (double* ga = sink.buffer(0))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += g[r * C + c] / B[detail::bindex(kind, r, c, C)];
    if (double* gb = sink.buffer(1))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) {
          const double bv = B[detail::bindex(kind, r, c, C)];
          gb[detail::bindex(kind, r, c, C)] -= g[r * C + c] * A[r * C + c] / (bv * bv);
        }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  return make_result(a.rows(), a.cols(), std::move(out), {a}, [s](const detail::Node& self, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += s * g[i];
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v += s;
  return make_result(a.rows(), a.cols(), std::move(out), {a}, [](const detail::Node& self, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Unary elementwise

namespace detail {

template <class F, class D>
Tensor unary(const Tensor& a, F f, D dfdx) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
  return make_result(a.rows(), a.cols(), std::move(out), {a}, [dfdx](const Node& self, const double* g, GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    const double* x = self.parents[0]->value.data();
    for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i] * dfdx(x[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope) {
  return detail::unary(a, [slope](double x) { return x > 0 ? x : slope * x; },
                       [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline Tensor log_softmax(const Tensor& a) {
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r) {
    const double* x = a.data().data() + r * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x[c]);
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(x[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = x[c] - lse;
  }
  return make_result(R, C, std::move(out), {a}, [R, C](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    for (std::size_t r = 0; r < R; ++r) {
      double gs = 0;
      for (std::size_t c = 0; c < C; ++c) gs += g[r * C + c];
      for (std::size_t c = 0; c < C; ++c)
        ga[r * C + c] += g[r * C + c] - std::exp(self.value[r * C + c]) * gs;
    }
  });
}

// softmax(x / T) per row.
inline Tensor softmax(const Tensor& a, double temperature = 1.0) {
  if (!(temperature > 0)) throw ParameterError("softmax: temperature must be positive");
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < R; ++r) {
    const double* x = a.data().data() + r * C;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x[c] / temperature);
    double s = 0;
    for (std::size_t c = 0; c < C; ++c) s += (out[r * C + c] = std::exp(x[c] / temperature - mx));
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] /= s;
  }
  return make_result(R, C, std::move(out), {a}, [R, C, temperature](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    for (std::size_t r = 0; r < R; ++r) {
      const double* y = self.value.data() + r * C;
      double dot = 0;
      for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * y[c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += y[c] * (g[r * C + c] - dot) / temperature;
    }
  });
}

// Per-column statistics recorded by batch_norm in training mode.
struct BatchNormStats {
  std::vector<double> mean;
  std::vector<double> var;  // unbiased
};

// Normalizes every column over the rows (the batch), then applies the affine
// gamma/beta (1 x cols). In training mode batch statistics are used and, when
// `record` is given, written to it. Otherwise `fixed` statistics are applied.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, bool training,
                         BatchNormStats* record = nullptr, const BatchNormStats* fixed = nullptr) {
  const std::size_t R = x.rows(), C = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != C || beta.rows() != 1 || beta.cols() != C)
    throw ShapeError("batch_norm: affine parameters " + gamma.shape() + "/" + beta.shape() + " do not match " + x.shape());
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  if (training) {
    if (R == 0) throw ShapeError("batch_norm: empty batch");
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) mean[c] += x.at(r, c);
    for (double& m : mean) m /= static_cast<double>(R);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < C; ++c) {
        const double d = x.at(r, c) - mean[c];
        var[c] += d * d;
      }
    if (record) {
      record->mean = mean;
      record->var.resize(C);
      for (std::size_t c = 0; c < C; ++c) record->var[c] = R > 1 ? var[c] / static_cast<double>(R - 1) : var[c];
    }
    for (double& v : var) v /= static_cast<double>(R);
  } else {
    if (!fixed || fixed->mean.size() != C) throw ContractError("batch_norm: evaluation without recorded statistics");
    mean = fixed->mean;
    var = fixed->var;
  }
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  std::vector<double> xhat(R * C), out(R * C);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (x.at(r, c) - mean[c]) * inv_std[c];
      out[r * C + c] = xhat[r * C + c] * gamma.data()[c] + beta.data()[c];
    }
  return make_result(R, C, std::move(out), {x, gamma, beta},
                     [R, C, training, inv_std, xhat = std::move(xhat)](const detail::Node& self, const double* g, detail::GradSink& sink) {
                       const double* gm = self.parents[1]->value.data();
                       if (double* gg = sink.buffer(1))
                         for (std::size_t r = 0; r < R; ++r)
                           for (std::size_t c = 0; c < C; ++c) gg[c] += g[r * C + c] * xhat[r * C + c];
                       if (double* gb = sink.buffer(2))
                         for (std::size_t r = 0; r < R; ++r)
                           for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                       double* gx = sink.buffer(0);
                       if (!gx) return;
                       if (!training) {
                         for (std::size_t r = 0; r < R; ++r)
                           for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] * gm[c] * inv_std[c];
                         return;
                       }
                       const double n = static_cast<double>(R);
                       for (std::size_t c = 0; c < C; ++c) {
                         double sum_g = 0, sum_gx = 0;
                         for (std::size_t r = 0; r < R; ++r) {
                           const double gh = g[r * C + c] * gm[c];
                           sum_g += gh;
                           sum_gx += gh * xhat[r * C + c];
                         }
                         for (std::size_t r = 0; r < R; ++r) {
                           const double gh = g[r * C + c] * gm[c];
                           gx[r * C + c] += inv_std[c] / n * (n * gh - sum_g - xhat[r * C + c] * sum_gx);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += v;
  return make_result(1, 1, {s}, {a}, [](const detail::Node& self, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) ga[i] += g[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor l1_norm(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += std::abs(v);
  return make_result(1, 1, {s}, {a}, [](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[0] * (x[i] > 0 ? 1.0 : x[i] < 0 ? -1.0 : 0.0);
  });
}

inline Tensor squared_l2_norm(const Tensor& a) {
  double s = 0;
  for (double v : a.data()) s += v * v;
  return make_result(1, 1, {s}, {a}, [](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * g[0] * x[i];
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = parts[0].rows();
  std::vector<std::size_t> offs{0};
  for (const auto& p : parts) {
    detail::require(p.rows() == R, "concat_cols", parts[0], p);
    offs.push_back(offs.back() + p.cols());
  }
  const std::size_t C = offs.back();
  std::vector<double> out(R * C);
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t r = 0; r < R; ++r)
      std::copy_n(parts[k].data().data() + r * parts[k].cols(), parts[k].cols(), out.data() + r * C + offs[k]);
  return make_result(R, C, std::move(out), parts, [R, C, offs](const detail::Node& self, const double* g, detail::GradSink& sink) {
    for (std::size_t k = 0; k + 1 < offs.size(); ++k) {
      double* gp = sink.buffer(k);
      if (!gp) continue;
      const std::size_t w = self.parents[k]->cols;
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += g[r * C + offs[k] + c];
    }
  });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t C = parts[0].cols();
  std::vector<double> out;
  std::vector<std::size_t> offs{0};
  for (const auto& p : parts) {
    detail::require(p.cols() == C, "concat_rows", parts[0], p);
    out.insert(out.end(), p.data().begin(), p.data().end());
    offs.push_back(offs.back() + p.size());
  }
  const std::size_t R = out.size() / std::max<std::size_t>(C, 1);
  return make_result(R, C, std::move(out), parts, [offs](const detail::Node& self, const double* g, detail::GradSink& sink) {
    for (std::size_t k = 0; k + 1 < offs.size(); ++k)
      if (double* gp = sink.buffer(k))
        for (std::size_t i = 0; i < self.parents[k]->value.size(); ++i) gp[i] += g[offs[k] + i];
  });
}

// out[i, :] = a[idx[i], :]
inline Tensor gather_rows(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> idx) {
  const std::size_t C = a.cols();
  std::vector<double> out(idx->size() * C);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= a.rows())
      throw ShapeError("gather_rows: row " + std::to_string((*idx)[i]) + " out of range for " + a.shape());
    std::copy_n(a.data().data() + (*idx)[i] * C, C, out.data() + i * C);
  }
  return make_result(idx->size(), C, std::move(out), {a}, [idx, C](const detail::Node&, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t c = 0; c < C; ++c) ga[(*idx)[i] * C + c] += g[i * C + c];
  });
}

inline Tensor gather_rows(const Tensor& a, std::vector<std::size_t> idx) {
  return gather_rows(a, std::make_shared<const std::vector<std::size_t>>(std::move(idx)));
}

// Flat element selection; returns a column vector.
inline Tensor gather_entries(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> idx) {
  std::vector<double> out(idx->size());
  for (std::size_t i = 0; i < idx->size(); ++i) out[i] = a.data().at((*idx)[i]);
  return make_result(idx->size(), 1, std::move(out), {a}, [idx](const detail::Node&, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i = 0; i < idx->size(); ++i) ga[(*idx)[i]] += g[i];
  });
}

// out[dst[i], :] += a[i, :]
inline Tensor scatter_add_rows(const Tensor& a, std::shared_ptr<const std::vector<std::size_t>> dst, std::size_t out_rows) {
  if (dst->size() != a.rows())
    throw ShapeError("scatter_add_rows: " + std::to_string(dst->size()) + " targets for " + a.shape());
  const std::size_t C = a.cols();
  std::vector<double> out(out_rows * C, 0.0);
  for (std::size_t i = 0; i < dst->size(); ++i) {
    if ((*dst)[i] >= out_rows) throw ShapeError("scatter_add_rows: target row out of range");
    for (std::size_t c = 0; c < C; ++c) out[(*dst)[i] * C + c] += a.data()[i * C + c];
  }
  return make_result(out_rows, C, std::move(out), {a}, [dst, C](const detail::Node&, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    for (std::size_t i = 0; i < dst->size(); ++i)
      for (std::size_t c = 0; c < C; ++c) ga[i * C + c] += g[(*dst)[i] * C + c];
  });
}

// Softmax of a column vector within groups: entries sharing segment[i] are
// normalized together.
inline Tensor segment_softmax(const Tensor& logits, std::shared_ptr<const std::vector<std::size_t>> segment, std::size_t num_segments) {
  if (logits.cols() != 1 || segment->size() != logits.rows())
    throw ShapeError("segment_softmax: expected a column vector matching " + std::to_string(segment->size()) + " segments, got " + logits.shape());
  const std::size_t E = logits.rows();
  std::vector<double> mx(num_segments, -std::numeric_limits<double>::infinity()), denom(num_segments, 0.0);
  for (std::size_t e = 0; e < E; ++e) mx[(*segment)[e]] = std::max(mx[(*segment)[e]], logits.data()[e]);
  std::vector<double> out(E);
  for (std::size_t e = 0; e < E; ++e) denom[(*segment)[e]] += (out[e] = std::exp(logits.data()[e] - mx[(*segment)[e]]));
  for (std::size_t e = 0; e < E; ++e) out[e] /= denom[(*segment)[e]];
  return make_result(E, 1, std::move(out), {logits}, [segment, num_segments](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* ga = sink.buffer(0);
    if (!ga) return;
    std::vector<double> dot(num_segments, 0.0);
    const auto& y = self.value;
    for (std::size_t e = 0; e < y.size(); ++e) dot[(*segment)[e]] += g[e] * y[e];
    for (std::size_t e = 0; e < y.size(); ++e) ga[e] += y[e] * (g[e] - dot[(*segment)[e]]);
  });
}

// x[e] / sum of x over its segment; segments with zero total map to 0.
inline Tensor segment_normalize(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> segment, std::size_t num_segments) {
  if (x.cols() != 1 || segment->size() != x.rows())
    throw ShapeError("segment_normalize: expected a column vector matching the segments, got " + x.shape());
  std::vector<double> total(num_segments, 0.0);
  for (std::size_t e = 0; e < x.rows(); ++e) total[(*segment)[e]] += x.data()[e];
  std::vector<double> out(x.rows());
  for (std::size_t e = 0; e < x.rows(); ++e) {
    const double t = total[(*segment)[e]];
    out[e] = t != 0.0 ? x.data()[e] / t : 0.0;
  }
  return make_result(x.rows(), 1, std::move(out), {x}, [segment, total](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* gx = sink.buffer(0);
    if (!gx) return;
    std::vector<double> dot(total.size(), 0.0);
    for (std::size_t e = 0; e < self.value.size(); ++e) dot[(*segment)[e]] += g[e] * self.value[e];
    for (std::size_t e = 0; e < self.value.size(); ++e) {
      const double t = total[(*segment)[e]];
      if (t != 0.0) gx[e] += (g[e] - dot[(*segment)[e]]) / t;
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

// Mean over `rows` of -logp[r, label[r]].
inline Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& labels, const std::vector<std::size_t>& rows) {
  if (labels.size() != log_probs.rows())
    throw ShapeError("nll_loss: " + std::to_string(labels.size()) + " labels for " + log_probs.shape());
  if (rows.empty()) throw ShapeError("nll_loss: no rows selected");
  const std::size_t C = log_probs.cols();
  std::vector<std::size_t> flat;
  flat.reserve(rows.size());
  double s = 0;
  for (std::size_t r : rows) {
    const auto y = static_cast<std::size_t>(labels.at(r));
    if (y >= C) throw ShapeError("nll_loss: label outside output width");
    flat.push_back(r * C + y);
    s -= log_probs.data()[r * C + y];
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  return make_result(1, 1, {s * inv}, {log_probs}, [flat = std::move(flat), inv](const detail::Node&, const double* g, detail::GradSink& sink) {
    if (double* ga = sink.buffer(0))
      for (std::size_t i : flat) ga[i] -= g[0] * inv;
  });
}

// Mean over `rows` of -sum_c target[r, c] * logp[r, c].
inline Tensor soft_cross_entropy(const Tensor& log_probs, const Tensor& targets, const std::vector<std::size_t>& rows) {
  detail::require(log_probs.rows() == targets.rows() && log_probs.cols() == targets.cols(), "soft_cross_entropy", log_probs, targets);
  if (rows.empty()) throw ShapeError("soft_cross_entropy: no rows selected");
  const std::size_t C = log_probs.cols();
  double s = 0;
  for (std::size_t r : rows)
    for (std::size_t c = 0; c < C; ++c) s -= targets.at(r, c) * log_probs.at(r, c);
  const double inv = 1.0 / static_cast<double>(rows.size());
  return make_result(1, 1, {s * inv}, {log_probs, targets}, [rows, C, inv](const detail::Node& self, const double* g, detail::GradSink& sink) {
    const double* lp = self.parents[0]->value.data();
    const double* t = self.parents[1]->value.data();
    double* gl = sink.buffer(0);
    double* gt = sink.buffer(1);
    for (std::size_t r : rows)
      for (std::size_t c = 0; c < C; ++c) {
        if (gl) gl[r * C + c] -= g[0] * inv * t[r * C + c];
        if (gt) gt[r * C + c] -= g[0] * inv * lp[r * C + c];
      }
  });
}

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "mse_loss", a, b);
  return mean(mul(sub(a, b), sub(a, b)));
}

// Mean binary entropy of probabilities p, clamped to [eps, 1 - eps] inside the logs.
inline Tensor bernoulli_entropy(const Tensor& p, double eps) {
  if (p.size() == 0) throw ShapeError("bernoulli_entropy: empty tensor");
  const double n = static_cast<double>(p.size());
  double s = 0;
  auto clamp = [eps](double x) { return std::clamp(x, eps, 1.0 - eps); };
  for (double x : p.data()) s += -x * std::log(clamp(x)) - (1 - x) * std::log(clamp(1 - x));
  return make_result(1, 1, {s / n}, {p}, [n, clamp](const detail::Node& self, const double* g, detail::GradSink& sink) {
    double* gp = sink.buffer(0);
    if (!gp) return;
    const auto& x = self.parents[0]->value;
    for (std::size_t i = 0; i < x.size(); ++i) {
      // The +-1 terms of the unclamped derivative cancel; inside the clamped
      // band both logs are constant and the same expression remains.
      const double d = std::log(clamp(1 - x[i])) - std::log(clamp(x[i]));
      gp[i] += g[0] * d / n;
    }
  });
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamOptions options;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Bias-corrected Adam update, applied in place to the parameter leaves.
inline void adam_step(std::vector<Tensor>& params, const Gradients& grads, AdamState& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.size(), 0.0);
      state.second_moment.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ShapeError("adam_step: state tracks " + std::to_string(state.first_moment.size()) + " parameters, got " +
                     std::to_string(params.size()));
  ++state.step;
  const auto& o = state.options;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (m.size() != params[k].size())
      throw ShapeError("adam_step: moment buffer size " + std::to_string(m.size()) + " differs from parameter " +
                       params[k].shape());
    const std::vector<double>* g = grads.find(params[k]);
    auto& x = params[k].mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      m[i] = o.beta1 * m[i] + (1 - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1 - o.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
  }
}

}  // namespace gnnbench::ad
