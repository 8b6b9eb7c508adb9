#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "smlp/autograd.hpp"
#include "smlp/tensor.hpp"

namespace smlp {

struct TrainConfig {
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double weight_decay = 0.05;
  std::size_t warmup_epochs = 5;
  std::size_t total_epochs = 20;
  std::size_t batch_size = 64;
  double label_smoothing = 0.1;
  double droppath = 0.0;
  std::uint64_t seed = 0;
  bool augment = true;
  // Optional cap on the number of training samples (0 keeps all).
  std::size_t subset = 0;

  void validate() const {
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) {
      throw ConfigError("train: label_smoothing must lie in [0, 1)");
    }
    if (!(lr_min <= lr_max) || lr_min < 0.0) throw ConfigError("train: need 0 <= lr_min <= lr_max");
    if (total_epochs == 0) throw ConfigError("train: total_epochs must be positive");
    if (warmup_epochs >= total_epochs) throw ConfigError("train: warmup_epochs must be smaller than total_epochs");
    if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
    if (!(droppath >= 0.0 && droppath < 1.0)) throw ConfigError("train: droppath must lie in [0, 1)");
  }
};

// Linear warmup from 0 to lr_max over the warmup steps, then cosine decay that
// reaches lr_min on the final step (total_epochs * steps_per_epoch - 1).
inline double lr_at(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch) {
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;
  const std::size_t total = cfg.total_epochs * steps_per_epoch;
  if (step < warmup) return cfg.lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == 0 || step + 1 >= total) return cfg.lr_min;
  const std::size_t span = total - warmup - 1;
  if (span == 0) return cfg.lr_max;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(span);
  return cfg.lr_max - 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 - std::cos(std::numbers::pi * t));
}

// AdamW with decoupled weight decay. Decay applies to ParamKind::weight only.
template <typename T>
class AdamW {
 public:
  struct Moments {
    Tensor<T> m;
    Tensor<T> v;
  };

  AdamW() = default;
  explicit AdamW(ParameterList<T> params, double weight_decay = 0.05, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    moments_.reserve(params_.size());
    for (const auto& p : params_) moments_.push_back({Tensor<T>(p.param->value.shape()), Tensor<T>(p.param->value.shape())});
  }

  void step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(eps_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i].param;
      auto w = p.value.data();
      if (moments_[i].m.shape() != p.value.shape()) {
        throw ShapeError("adamw: state for '" + params_[i].name + "' has shape " + to_string(moments_[i].m.shape()) +
                         " but the parameter has shape " + to_string(p.value.shape()));
      }
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      auto g = p.grad.data();
      auto m = moments_[i].m.data();
      auto v = moments_[i].v.data();
      if (p.kind == ParamKind::weight && weight_decay_ != 0.0) {
        const T shrink = static_cast<T>(1.0 - lr * weight_decay_);
        for (auto& x : w) x *= shrink;
      }
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.param->zero_grad();
  }

  std::uint64_t steps() const noexcept { return steps_; }
  void set_steps(std::uint64_t s) noexcept { steps_ = s; }
  const ParameterList<T>& parameters() const noexcept { return params_; }
  std::vector<Moments>& moments() noexcept { return moments_; }
  const std::vector<Moments>& moments() const noexcept { return moments_; }

 private:
  ParameterList<T> params_;
  std::vector<Moments> moments_;
  double weight_decay_ = 0.05;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::uint64_t steps_ = 0;
};

}  // namespace smlp
