#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// linearises the reachable graph into a Tape (inputs before consumers) and
// replays the adjoints in reverse. Adjoint buffers live in the Tape, not in
// the nodes, so gradients() may run concurrently on graphs sharing leaves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "protodiff/errors.hpp"
#include "protodiff/random.hpp"

namespace protodiff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node;

// gin[i] is the adjoint accumulator of input i, or nullptr when that input
// does not need a gradient.
using BackwardFn =
    std::function<void(const Node& self, std::span<const double> gout, std::span<std::vector<double>* const> gin)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  const char* op = "leaf";
};

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value");
  }
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_string(shape));
    }
    detail::check_finite(values, "tensor");
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  static Tensor identity(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(v));
  }

  // Standard-normal constant; the draw is not differentiated through.
  static Tensor randn(Shape shape, Rng& rng) {
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = standard_normal(rng);
    return Tensor(std::move(shape), std::move(v));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + detail::shape_string(shape()));
    return node_->value[0];
  }

  // In-place access for leaves (optimizer updates, initialisation).
  std::span<double> mutable_data() {
    if (node_->backward) throw ContractError("mutable_data() on a non-leaf tensor");
    return node_->value;
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool is_leaf() const { return !node_->backward; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const char* op_name() const { return node_->op; }

  // Internal: wraps a node produced by an op.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Topologically ordered record of the graph reachable from a root through
// gradient-requiring nodes.
class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    if (!root.requires_grad()) return tape;
    std::unordered_map<const detail::Node*, bool> done;
    std::vector<std::pair<const detail::Node*, std::size_t>> stack{{root.node().get(), 0}};
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next == 0 && done.count(node)) {
        stack.pop_back();
        continue;
      }
      if (next < node->inputs.size()) {
        const detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && !done.count(child)) stack.push_back({child, 0});
        continue;
      }
      if (!done.count(node)) {
        done[node] = true;
        tape.position_[node] = tape.nodes_.size();
        tape.nodes_.push_back(node);
      }
      stack.pop_back();
    }
    return tape;
  }

  std::span<const detail::Node* const> nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  bool contains(const Tensor& t) const { return position_.count(t.node().get()) > 0; }
  std::size_t position(const Tensor& t) const { return position_.at(t.node().get()); }

  // Reverse sweep seeded with d(root)/d(root) = seed. Returns adjoints indexed
  // by tape position.
  std::vector<std::vector<double>> adjoints(std::span<const double> seed) const {
    std::vector<std::vector<double>> adj(nodes_.size());
    if (nodes_.empty()) return adj;
    adj.back().assign(seed.begin(), seed.end());
    std::vector<std::vector<double>*> gin;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      const detail::Node* node = nodes_[i];
      if (!node->backward || adj[i].empty()) continue;
      gin.assign(node->inputs.size(), nullptr);
      for (std::size_t k = 0; k < node->inputs.size(); ++k) {
        const detail::Node* in = node->inputs[k].get();
        if (!in->requires_grad) continue;
        auto& buf = adj[position_.at(in)];
        if (buf.empty()) buf.assign(in->value.size(), 0.0);
        gin[k] = &buf;
      }
      node->backward(*node, adj[i], gin);
    }
    return adj;
  }

 private:
  std::vector<const detail::Node*> nodes_;
  std::unordered_map<const detail::Node*, std::size_t> position_;
};

// Accumulates d(loss)/d(leaf) into the grad buffer of every gradient-requiring
// leaf reachable from loss. Repeated calls accumulate.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? detail::shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that is not on the tape");
  const Tape tape = Tape::record(loss);
  const std::vector<double> seed{1.0};
  auto adj = tape.adjoints(seed);
  for (std::size_t i = 0; i < tape.size(); ++i) {
    auto* node = const_cast<detail::Node*>(tape.nodes()[i]);
    if (node->backward || adj[i].empty()) continue;
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    for (std::size_t j = 0; j < adj[i].size(); ++j) node->grad[j] += adj[i][j];
  }
}

// d(output)/d(inputs) without touching any leaf's grad buffer. Inputs that the
// output does not depend on get zero gradients.
inline std::vector<std::vector<double>> gradients(const Tensor& output, const std::vector<Tensor>& inputs) {
  if (output.size() != 1) throw ContractError("gradients() needs a scalar output");
  std::vector<std::vector<double>> out;
  out.reserve(inputs.size());
  const Tape tape = Tape::record(output);
  const std::vector<double> seed{1.0};
  auto adj = tape.adjoints(seed);
  for (const Tensor& in : inputs) {
    if (tape.contains(in) && !adj[tape.position(in)].empty()) {
      out.push_back(adj[tape.position(in)]);
    } else {
      out.emplace_back(in.size(), 0.0);
    }
  }
  return out;
}

namespace detail {

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          BackwardFn backward) {
  check_finite(value, op);
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
  }
  return Tensor(std::move(node));
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

inline std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw DimensionError(std::string(op) + ": needs rank >= 1, got scalar");
  return t.shape().back();
}

enum class BinaryKind { add, sub, mul };

// Elementwise binary op where one operand's shape is a suffix of the other's
// (broadcast over leading dimensions).
inline Tensor binary(BinaryKind kind, const Tensor& a, const Tensor& b) {
  const char* name = kind == BinaryKind::add ? "add" : kind == BinaryKind::sub ? "sub" : "mul";
  const bool a_big = is_suffix(b.shape(), a.shape());
  if (!a_big && !is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(name) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " are not broadcast-compatible");
  }
  const Shape out_shape = a_big ? a.shape() : b.shape();
  const std::size_t n = shape_size(out_shape);
  const std::size_t na = a.size(), nb = b.size();
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i % na], y = bv[i % nb];
    out[i] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
  }
  return make_result(name, out_shape, std::move(out), {a, b},
                     [kind, na, nb](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       const auto& x = self.inputs[0]->value;
                       const auto& y = self.inputs[1]->value;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::size_t ia = i % na, ib = i % nb;
                         if (gin[0]) (*gin[0])[ia] += kind == BinaryKind::mul ? g[i] * y[ib] : g[i];
                         if (gin[1]) {
                           (*gin[1])[ib] += kind == BinaryKind::mul ? g[i] * x[ia]
                                            : kind == BinaryKind::sub ? -g[i]
                                                                       : g[i];
                         }
                       }
                     });
}

template <typename F, typename DF>
inline Tensor unary(const char* name, const Tensor& a, F f, DF df_from_xy) {
  std::vector<double> out(a.size());
  const auto& av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(name, a.shape(), std::move(out), {a},
                     [df_from_xy](const Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
                       const auto& x = self.inputs[0]->value;
                       for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * df_from_xy(x[i], self.value[i]);
                     });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary(detail::BinaryKind::mul, a, b); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  return detail::unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh(const Tensor& a) {
  return detail::unary("tanh", a, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary("sigmoid", a, sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

// log(sigmoid(x)), stable for large |x|.
inline Tensor log_sigmoid(const Tensor& a) {
  return detail::unary(
      "log_sigmoid", a, [](double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) { return sigmoid_value(-x); });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor square(const Tensor& a) {
  return detail::unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// [n,k] x [k,m] -> [n,m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: shapes " + detail::shape_string(a.shape()) + " and " +
                         detail::shape_string(b.shape()) + " are incompatible");
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      const double* brow = bv.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += x * brow[j];
    }
  }
  return detail::make_result(
      "matmul", {n, m}, std::move(out), {a, b},
      [n, k, m](const detail::Node& self, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        const auto& x = self.inputs[0]->value;
        const auto& y = self.inputs[1]->value;
        if (gin[0]) {
          auto& ga = *gin[0];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * y[p * m + j];
              ga[i * k + p] += s;
            }
        }
        if (gin[1]) {
          auto& gb = *gin[1];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double xv = x[i * k + p];
              for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += xv * g[i * m + j];
            }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: needs rank 2, got " + detail::shape_string(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return detail::make_result(
      "transpose", {c, r}, std::move(out), {a},
      [r, c](const detail::Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) (*gin[0])[i * c + j] += g[j * r + i];
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + detail::shape_string(a.shape()) + " as " +
                         detail::shape_string(shape));
  }
  return detail::make_result("reshape", std::move(shape), a.values(), {a},
                             [](const detail::Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                             });
}

// Concatenate two rank-2 tensors with equal row counts along the columns.
inline Tensor concat_columns(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_columns: shapes " + detail::shape_string(a.shape()) + " and " +
                         detail::shape_string(b.shape()) + " are incompatible");
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<double> out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < ca; ++j) out[i * (ca + cb) + j] = a[i * ca + j];
    for (std::size_t j = 0; j < cb; ++j) out[i * (ca + cb) + ca + j] = b[i * cb + j];
  }
  return detail::make_result(
      "concat_columns", {n, ca + cb}, std::move(out), {a, b},
      [n, ca, cb](const detail::Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
        for (std::size_t i = 0; i < n; ++i) {
          if (gin[0])
            for (std::size_t j = 0; j < ca; ++j) (*gin[0])[i * ca + j] += g[i * (ca + cb) + j];
          if (gin[1])
            for (std::size_t j = 0; j < cb; ++j) (*gin[1])[i * cb + j] += g[i * (ca + cb) + ca + j];
        }
      });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result("sum", {}, {s}, {a},
                             [](const detail::Node&, std::span<const double> g, std::span<std::vector<double>* const> gin) {
                               for (double& x : *gin[0]) x += g[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Sum over the last axis: [..., n] -> [...]
inline Tensor sum_last(const Tensor& a) {
  const std::size_t n = detail::last_dim(a, "sum_last");
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  const std::size_t rows = a.size() / n;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += a[r * n + j];
  return detail::make_result("sum_last", std::move(shape), std::move(out), {a},
                             [n, rows](const detail::Node&, std::span<const double> g,
                                       std::span<std::vector<double>* const> gin) {
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t j = 0; j < n; ++j) (*gin[0])[r * n + j] += g[r];
                             });
}

// Softmax over the last axis.
inline Tensor softmax(const Tensor& a) {
  const std::size_t n = detail::last_dim(a, "softmax");
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return detail::make_result("softmax", a.shape(), std::move(out), {a},
                             [n, rows](const detail::Node& self, std::span<const double> g,
                                       std::span<std::vector<double>* const> gin) {
                               const auto& y = self.value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   (*gin[0])[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
                               }
                             });
}

// log(softmax(x)) over the last axis, computed with the log-sum-exp shift.
inline Tensor log_softmax(const Tensor& a) {
  const std::size_t n = detail::last_dim(a, "log_softmax");
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] - lse;
  }
  return detail::make_result("log_softmax", a.shape(), std::move(out), {a},
                             [n, rows](const detail::Node& self, std::span<const double> g,
                                       std::span<std::vector<double>* const> gin) {
                               const auto& y = self.value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   (*gin[0])[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
                               }
                             });
}

// Normalises each last-axis row to zero mean and unit variance (biased
// variance, eps inside the square root). Affine scale/shift is left to the
// caller.
inline Tensor layer_norm(const Tensor& a, double eps = 1e-5) {
  const std::size_t n = detail::last_dim(a, "layer_norm");
  const std::size_t rows = a.size() / n;
  std::vector<double> out(a.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.values().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (x[j] - mu) * inv_std[r];
  }
  return detail::make_result(
      "layer_norm", a.shape(), std::move(out), {a},
      [n, rows, inv_std = std::move(inv_std)](const detail::Node& self, std::span<const double> g,
                                              std::span<std::vector<double>* const> gin) {
        const auto& y = self.value;
        const double dn = static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double gm = 0.0, gy = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            gm += g[r * n + j];
            gy += g[r * n + j] * y[r * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            (*gin[0])[r * n + j] += inv_std[r] * (g[r * n + j] - gm / dn - y[r * n + j] * gy / dn);
          }
        }
      });
}

// out[r] = a[r, index[r]] for a of shape [rows, n].
inline Tensor gather_last(const Tensor& a, const std::vector<std::size_t>& index) {
  const std::size_t n = detail::last_dim(a, "gather_last");
  const std::size_t rows = a.size() / n;
  if (index.size() != rows) {
    throw DimensionError("gather_last: " + std::to_string(index.size()) + " indices for " + std::to_string(rows) +
                         " rows");
  }
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= n) throw BoundsError("gather_last: index " + std::to_string(index[r]) + " out of range");
    out[r] = a[r * n + index[r]];
  }
  return detail::make_result("gather_last", {rows}, std::move(out), {a},
                             [n, index](const detail::Node&, std::span<const double> g,
                                        std::span<std::vector<double>* const> gin) {
                               for (std::size_t r = 0; r < index.size(); ++r) (*gin[0])[r * n + index[r]] += g[r];
                             });
}

// Inverted dropout with a seeded mask; identity when training is false or p == 0.
inline Tensor dropout(const Tensor& a, double p, Rng& rng, bool training) {
  if (!training || p <= 0.0) return a;
  if (p >= 1.0) throw ContractError("dropout: p must be < 1");
  std::vector<double> mask(a.size());
  const double keep = 1.0 / (1.0 - p);
  for (double& m : mask) m = uniform01(rng) < p ? 0.0 : keep;
  return mul(a, Tensor(a.shape(), std::move(mask)));
}

}  // namespace protodiff
