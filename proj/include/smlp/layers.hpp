#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "smlp/autograd.hpp"
#include "smlp/ops.hpp"
#include "smlp/tensor.hpp"

namespace smlp {

enum class Mode { train, eval };

using Rng = std::mt19937_64;

// Uniform in [0, 1) from the top 53 bits; identical across standard libraries.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Normal(0, std) resampled until it falls within two standard deviations.
template <typename T>
Tensor<T> truncated_normal(Shape shape, double std, Rng& rng) {
  Tensor<T> t(std::move(shape));
  if (std == 0.0) return t;
  for (auto& v : t.data()) {
    double z = standard_normal(rng);
    while (std::abs(z) > 2.0) z = standard_normal(rng);
    v = static_cast<T>(z * std);
  }
  return t;
}

// One leaf entry of a cost walk. Counts are per image (batch of one).
struct LayerCost {
  std::string path;
  std::string kind;
  std::int64_t params = 0;
  std::int64_t bias_params = 0;
  std::int64_t macs = 0;
};

using CostSink = std::vector<LayerCost>;

inline std::string join_path(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in_features, std::size_t out_features, bool bias, Rng& rng, double init_std = 0.02)
      : in_features_(in_features),
        out_features_(out_features),
        has_bias_(bias),
        weight_(ParamKind::weight, truncated_normal<T>({out_features, in_features}, init_std, rng)) {
    if (bias) bias_ = Parameter<T>(ParamKind::bias, Tensor<T>({out_features}));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> w = tape.param(weight_);
    if (!has_bias_) return linear<T>(x, w, nullptr);
    Var<T> b = tape.param(bias_);
    return linear<T>(x, w, &b);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    out.push_back({join_path(prefix, "weight"), &weight_});
    if (has_bias_) out.push_back({join_path(prefix, "bias"), &bias_});
  }

  // `rows` is the number of vectors the layer is applied to per image.
  void account(CostSink& sink, const std::string& path, std::size_t rows) const {
    LayerCost c{path, "linear"};
    c.params = static_cast<std::int64_t>(weight_.value.size());
    if (has_bias_) {
      c.bias_params = static_cast<std::int64_t>(bias_.value.size());
      c.params += c.bias_params;
    }
    c.macs = static_cast<std::int64_t>(rows * in_features_ * out_features_);
    sink.push_back(c);
  }

  std::size_t in_features() const noexcept { return in_features_; }
  std::size_t out_features() const noexcept { return out_features_; }
  bool has_bias() const noexcept { return has_bias_; }
  std::size_t param_count() const noexcept { return out_features_ * in_features_ + (has_bias_ ? out_features_ : 0); }

  Parameter<T>& weight() noexcept { return weight_; }
  Parameter<T>& bias() noexcept { return bias_; }
  const Parameter<T>& weight() const noexcept { return weight_; }
  const Parameter<T>& bias() const noexcept { return bias_; }

 private:
  std::size_t in_features_ = 0;
  std::size_t out_features_ = 0;
  bool has_bias_ = false;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

// Per-channel 3x3 kernels; stride 1, zero padding 1, cross-correlation.
template <typename T>
class DepthwiseConv3x3 {
 public:
  DepthwiseConv3x3() = default;
  DepthwiseConv3x3(std::size_t channels, bool bias, Rng& rng, double init_std = 0.02)
      : channels_(channels),
        has_bias_(bias),
        kernel_(ParamKind::weight, truncated_normal<T>({channels, 3, 3}, init_std, rng)) {
    if (bias) bias_ = Parameter<T>(ParamKind::bias, Tensor<T>({channels}));
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    Var<T> k = tape.param(kernel_);
    if (!has_bias_) return dwconv3x3<T>(x, k, nullptr);
    Var<T> b = tape.param(bias_);
    return dwconv3x3<T>(x, k, &b);
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    out.push_back({join_path(prefix, "weight"), &kernel_});
    if (has_bias_) out.push_back({join_path(prefix, "bias"), &bias_});
  }

  void account(CostSink& sink, const std::string& path, std::size_t tokens) const {
    LayerCost c{path, "dwconv3x3"};
    c.params = static_cast<std::int64_t>(kernel_.value.size());
    if (has_bias_) {
      c.bias_params = static_cast<std::int64_t>(bias_.value.size());
      c.params += c.bias_params;
    }
    c.macs = static_cast<std::int64_t>(9 * tokens * channels_);
    sink.push_back(c);
  }

  std::size_t channels() const noexcept { return channels_; }
  std::size_t param_count() const noexcept { return 9 * channels_ + (has_bias_ ? channels_ : 0); }
  Parameter<T>& kernel() noexcept { return kernel_; }
  Parameter<T>& bias() noexcept { return bias_; }

 private:
  std::size_t channels_ = 0;
  bool has_bias_ = false;
  Parameter<T> kernel_;
  Parameter<T> bias_;
};

enum class NormKind { batch, layer };

template <typename T>
class Norm {
 public:
  Norm() = default;
  Norm(NormKind kind, std::size_t channels, double eps = 1e-5, double momentum = 0.1)
      : kind_(kind),
        channels_(channels),
        eps_(static_cast<T>(eps)),
        momentum_(static_cast<T>(momentum)),
        gamma_(ParamKind::norm, Tensor<T>({channels}, T{1})),
        beta_(ParamKind::norm, Tensor<T>({channels})) {
    if (kind == NormKind::batch) {
      running_mean_ = Tensor<T>({channels});
      running_var_ = Tensor<T>({channels}, T{1});
    }
  }

  // Batch kind: train mode normalizes with batch statistics and updates the
  // running estimates; eval mode applies the running estimates.
  Var<T> forward(Tape<T>& tape, Var<T> x, Mode mode) {
    Var<T> g = tape.param(gamma_);
    Var<T> b = tape.param(beta_);
    if (kind_ == NormKind::layer) return layer_norm<T>(x, g, b, eps_);
    if (mode == Mode::eval) {
      return batch_norm_eval<T>(x, g, b, running_mean_.data(), running_var_.data(), eps_);
    }
    std::vector<T> mu, var;
    auto y = batch_norm_train<T>(x, g, b, eps_, mu, var);
    const std::size_t rows = x.value().size() / channels_;
    const T unbias = rows > 1 ? static_cast<T>(rows) / static_cast<T>(rows - 1) : T(1);
    for (std::size_t c = 0; c < channels_; ++c) {
      running_mean_[c] = (T(1) - momentum_) * running_mean_[c] + momentum_ * mu[c];
      running_var_[c] = (T(1) - momentum_) * running_var_[c] + momentum_ * var[c] * unbias;
    }
    return y;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    out.push_back({join_path(prefix, "weight"), &gamma_});
    out.push_back({join_path(prefix, "bias"), &beta_});
  }

  void collect_buffers(const std::string& prefix, BufferList<T>& out) {
    if (kind_ != NormKind::batch) return;
    out.push_back({join_path(prefix, "running_mean"), &running_mean_});
    out.push_back({join_path(prefix, "running_var"), &running_var_});
  }

  void account(CostSink& sink, const std::string& path) const {
    LayerCost c{path, kind_ == NormKind::batch ? "batchnorm" : "layernorm"};
    c.params = static_cast<std::int64_t>(2 * channels_);
    sink.push_back(c);
  }

  NormKind kind() const noexcept { return kind_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t param_count() const noexcept { return 2 * channels_; }
  Parameter<T>& gamma() noexcept { return gamma_; }
  Parameter<T>& beta() noexcept { return beta_; }
  Tensor<T>& running_mean() noexcept { return running_mean_; }
  Tensor<T>& running_var() noexcept { return running_var_; }

 private:
  NormKind kind_ = NormKind::layer;
  std::size_t channels_ = 0;
  T eps_{};
  T momentum_{};
  Parameter<T> gamma_;
  Parameter<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

// Stochastic depth on a residual branch: per sample, keep with probability
// 1 - p and rescale kept samples by 1 / (1 - p).
template <typename T>
class DropPath {
 public:
  DropPath() = default;
  explicit DropPath(double p) : p_(p) {
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("DropPath: drop probability must lie in [0, 1)");
  }

  Var<T> forward(Var<T> branch, Mode mode, Rng* rng) const {
    if (mode == Mode::eval || p_ == 0.0) return branch;
    if (!rng) throw std::logic_error("DropPath: train mode needs a random generator");
    const std::size_t n = branch.value().dim(0);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_));
    std::vector<T> scales(n);
    for (auto& s : scales) s = uniform01(*rng) < 1.0 - p_ ? keep_scale : T(0);
    return sample_scale<T>(branch, std::move(scales));
  }

  double probability() const noexcept { return p_; }

 private:
  double p_ = 0.0;
};

}  // namespace smlp
