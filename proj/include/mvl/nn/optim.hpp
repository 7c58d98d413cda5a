#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "mvl/error.hpp"
#include "mvl/nn/layers.hpp"

namespace mvl::nn {

struct OneCycleConfig {
  double max_lr = 1e-4;
  double pct_start = 0.3;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  bool cycle_momentum = true;
  double base_momentum = 0.85;
  double max_momentum = 0.95;
};

/// One-cycle policy with cosine annealing: warm up from max_lr/div_factor to
/// max_lr over pct_start of the steps, then anneal to
/// max_lr/(div_factor*final_div_factor). Momentum (Adam beta1) moves
/// inversely between base and max.
class OneCycleSchedule {
 public:
  OneCycleSchedule(OneCycleConfig cfg, std::size_t total_steps) : cfg_(cfg), total_(total_steps) {
    if (total_steps == 0) throw RuntimeError("one-cycle schedule needs at least one step");
    if (!(cfg.pct_start > 0.0 && cfg.pct_start < 1.0)) throw SchemaError("pct_start must lie in (0, 1)");
  }

  std::size_t total_steps() const { return total_; }
  const OneCycleConfig& config() const { return cfg_; }

  double lr(std::size_t step) const {
    const double initial = cfg_.max_lr / cfg_.div_factor;
    const double minimum = initial / cfg_.final_div_factor;
    return interpolate(step, initial, cfg_.max_lr, minimum);
  }

  double momentum(std::size_t step) const {
    if (!cfg_.cycle_momentum) return cfg_.max_momentum;
    return interpolate(step, cfg_.max_momentum, cfg_.base_momentum, cfg_.max_momentum);
  }

 private:
  static double cos_anneal(double start, double end, double pct) {
    return end + (start - end) / 2.0 * (std::cos(std::numbers::pi * pct) + 1.0);
  }

  double interpolate(std::size_t step, double start, double peak, double end) const {
    const double s = static_cast<double>(step);
    const double warm_end = cfg_.pct_start * static_cast<double>(total_) - 1.0;
    const double last = static_cast<double>(total_) - 1.0;
    if (s <= warm_end) {
      const double pct = warm_end > 0.0 ? s / warm_end : 1.0;
      return cos_anneal(start, peak, pct);
    }
    const double span = last - warm_end;
    const double pct = span > 0.0 ? std::min(1.0, (s - warm_end) / span) : 1.0;
    return cos_anneal(peak, end, pct);
  }

  OneCycleConfig cfg_;
  std::size_t total_;
};

/// Adam. Moment buffers follow the order of the parameter list they were
/// created for.
template <class T>
class Adam {
 public:
  struct State {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::size_t steps = 0;
  };

  explicit Adam(const ParamList<T>& params, double beta2 = 0.999, double eps = 1e-8)
      : params_(params), beta2_(beta2), eps_(eps) {
    for (const auto* p : params_) {
      state_.m.emplace_back(p->value.shape());
      state_.v.emplace_back(p->value.shape());
    }
  }

  void step(double lr, double beta1) {
    ++state_.steps;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state_.steps));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.steps));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      T* m = state_.m[i].data();
      T* v = state_.v[i].data();
      for (std::size_t k = 0; k < p.size(); ++k) {
        const T g = p.grad[k];
        m[k] = b1 * m[k] + (T{1} - b1) * g;
        v[k] = b2 * v[k] + (T{1} - b2) * g * g;
        p.value[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_bc2) + eps);
      }
    }
  }

  void zero_grad() { nn::zero_grad(params_); }

  State& state() { return state_; }
  const State& state() const { return state_; }

 private:
  ParamList<T> params_;
  double beta2_;
  double eps_;
  State state_;
};

}  // namespace mvl::nn
