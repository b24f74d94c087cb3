#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "protodiff/errors.hpp"
#include "protodiff/nn.hpp"

namespace protodiff {

// base_lr * (1 + cos(pi * step / total)) / 2; steps past total clamp to 0.
inline double cosine_lr(std::size_t step, std::size_t total, double base_lr) {
  if (total == 0) throw ContractError("cosine_lr: total must be > 0");
  if (step >= total) return 0.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

struct AdamWConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class ScheduleKind { constant, cosine };

struct OptimizerState {
  AdamWConfig config;
  ScheduleKind schedule = ScheduleKind::constant;
  std::size_t schedule_total = 0;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// AdamW with decoupled weight decay. The learning rate used by step() is the
// base rate, or cosine_lr(progress, schedule_total, base) when a cosine
// schedule is attached; callers advance progress via set_progress().
class AdamW {
 public:
  AdamW(ParameterList params, AdamWConfig config = {}) : params_(std::move(params)) {
    state_.config = config;
    for (const auto& p : params_) {
      state_.first_moment.emplace_back(p.tensor.size(), 0.0);
      state_.second_moment.emplace_back(p.tensor.size(), 0.0);
    }
  }

  void use_cosine_schedule(std::size_t total) {
    if (total == 0) throw ContractError("cosine schedule needs total > 0");
    state_.schedule = ScheduleKind::cosine;
    state_.schedule_total = total;
  }

  void set_progress(std::size_t progress) { progress_ = progress; }

  double current_lr() const {
    if (state_.schedule == ScheduleKind::cosine) return cosine_lr(progress_, state_.schedule_total, state_.config.lr);
    return state_.config.lr;
  }

  void step() {
    const auto& c = state_.config;
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) throw ContractError("adamw_step: parameter '" + p.name + "' has no gradient");
    }
    ++state_.step;
    const double lr = current_lr();
    const double t = static_cast<double>(state_.step);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& tensor = params_[i].tensor;
      auto w = tensor.mutable_data();
      auto g = tensor.grad();
      auto& m = state_.first_moment[i];
      auto& v = state_.second_moment[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
        const double m_hat = m[j] / bc1;
        const double v_hat = v[j] / bc2;
        w[j] *= 1.0 - lr * c.weight_decay;
        w[j] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
      }
    }
  }

  void zero_grad() { zero_grads(params_); }

  const OptimizerState& state() const { return state_; }
  const ParameterList& parameters() const { return params_; }

 private:
  ParameterList params_;
  OptimizerState state_;
  std::size_t progress_ = 0;
};

}  // namespace protodiff
