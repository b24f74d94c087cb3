#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protodiff/random.hpp"
#include "protodiff/tensor.hpp"

namespace protodiff {

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

inline Tensor uniform_parameter(Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// y = x W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;

  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_parameter({in, out}, bound, rng);
    bias = uniform_parameter({out}, bound, rng);
  }

  static Linear zeros(std::size_t in, std::size_t out) {
    Linear l;
    l.weight = Tensor::zeros({in, out}, true);
    l.bias = Tensor::zeros({out}, true);
    return l;
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

  // Copy whose tensors do not track gradients (inference only).
  Linear frozen() const {
    Linear l;
    l.weight = weight.detach();
    l.bias = bias.detach();
    return l;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

enum class Activation { relu, tanh, sigmoid };

inline Tensor activate(Activation a, const Tensor& x) {
  switch (a) {
    case Activation::relu:
      return relu(x);
    case Activation::tanh:
      return tanh(x);
    case Activation::sigmoid:
      return sigmoid(x);
  }
  return x;
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::tanh:
      return "tanh";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "sigmoid") return Activation::sigmoid;
  throw ContractError("unknown activation '" + s + "'");
}

// Stack of Linear layers with an activation between consecutive layers and
// none after the last.
struct Mlp {
  std::vector<Linear> layers;
  Activation activation = Activation::relu;

  Mlp() = default;

  Mlp(const std::vector<std::size_t>& widths, Activation act, Rng& rng) : activation(act) {
    if (widths.size() < 2) throw ContractError("Mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1], rng);
  }

  std::size_t in_features() const { return layers.front().in_features(); }
  std::size_t out_features() const { return layers.back().out_features(); }

  Tensor operator()(Tensor x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = activate(activation, x);
    }
    return x;
  }

  Mlp frozen() const {
    Mlp m;
    m.activation = activation;
    for (const auto& l : layers) m.layers.push_back(l.frozen());
    return m;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
  }
};

// Rebuilds an Mlp from checkpoint records "<prefix>.<i>.weight/bias".
template <typename Records>
Mlp mlp_from_records(const Records& ck, const std::string& prefix, std::size_t layers, Activation act) {
  Mlp m;
  m.activation = act;
  for (std::size_t i = 0; i < layers; ++i) {
    const auto& w = ck.record(prefix + "." + std::to_string(i) + ".weight");
    const auto& b = ck.record(prefix + "." + std::to_string(i) + ".bias");
    Linear l;
    l.weight = Tensor(w.shape, w.values, true);
    l.bias = Tensor(b.shape, b.values, true);
    m.layers.push_back(std::move(l));
  }
  return m;
}

inline void zero_grads(ParameterList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

// Copies parameter values (used for best-epoch snapshots).
inline std::vector<std::vector<double>> snapshot(const ParameterList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor.values());
  return out;
}

inline void restore(ParameterList& params, const std::vector<std::vector<double>>& values) {
  if (values.size() != params.size()) throw ContractError("restore: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    if (dst.size() != values[i].size()) throw DimensionError("restore: size mismatch for " + params[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace protodiff
