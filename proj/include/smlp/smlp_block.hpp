#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smlp/config.hpp"
#include "smlp/layers.hpp"
#include "smlp/ops.hpp"

namespace smlp {

namespace detail {

// Accepts (H,W,C) or (N,H,W,C); returns the rank-4 view.
template <typename T>
Var<T> as_batched_grid(Var<T> x, bool& was_unbatched) {
  was_unbatched = x.shape().size() == 3;
  if (!was_unbatched) return x;
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return reshape<T>(x, s);
}

}  // namespace detail

// Sparse MLP token mixer. The vertical projection is an H x H map shared by
// every column (mixes across rows); the horizontal projection is a W x W map
// shared by every row. Branch outputs are fused per the configured options;
// the default is FC(concat(X_H, X_W, X)).
template <typename T>
class SmlpBlock {
 public:
  SmlpBlock() = default;
  SmlpBlock(std::size_t height, std::size_t width, std::size_t channels, SmlpOptions options, Rng& rng,
            double init_std = 0.02)
      : height_(height),
        width_(width),
        channels_(channels),
        options_(options),
        vertical_(height, height, true, rng, init_std),
        horizontal_(width, width, true, rng, init_std) {
    const std::size_t k = options_.branch_count();
    if (options_.fusion == Fusion::concat_fc) {
      fuse_ = Linear<T>(k * channels, channels, true, rng, init_std);
    } else if (options_.fusion == Fusion::weighted_sum) {
      for (std::size_t i = 0; i < k; ++i) {
        branch_weights_.emplace_back(ParamKind::weight, Tensor<T>({channels}, T(1) / static_cast<T>(k)));
      }
    }
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    bool unbatched = false;
    Var<T> grid = detail::as_batched_grid(x, unbatched);
    const Shape& s = grid.shape();
    if (s.size() != 4 || s[1] != height_ || s[2] != width_ || s[3] != channels_) {
      throw ShapeError("sMLP block built for (H, W, C) = (" + std::to_string(height_) + ", " + std::to_string(width_) +
                       ", " + std::to_string(channels_) + ") cannot process input of shape " + smlp::to_string(s) +
                       "; the projections are tied to the training resolution");
    }

    std::vector<Var<T>> branches;
    switch (options_.topology) {
      case Topology::parallel:
        branches.push_back(mix_vertical(tape, grid));
        branches.push_back(mix_horizontal(tape, grid));
        break;
      case Topology::sequential_h_first:
        branches.push_back(mix_vertical(tape, mix_horizontal(tape, grid)));
        break;
      case Topology::sequential_v_first:
        branches.push_back(mix_horizontal(tape, mix_vertical(tape, grid)));
        break;
    }
    if (options_.identity) branches.push_back(grid);

    Var<T> out = fuse(tape, branches);
    if (unbatched) out = reshape<T>(out, Shape{height_, width_, channels_});
    return out;
  }

  // Mixes along H at every (column, channel): the H x H projection.
  Var<T> mix_vertical(Tape<T>& tape, Var<T> x) {
    Var<T> cols = permute<T>(x, {0, 2, 3, 1});  // (N, W, C, H)
    return permute<T>(vertical_.forward(tape, cols), {0, 3, 1, 2});
  }

  // Mixes along W at every (row, channel): the W x W projection.
  Var<T> mix_horizontal(Tape<T>& tape, Var<T> x) {
    Var<T> rows = permute<T>(x, {0, 1, 3, 2});  // (N, H, C, W)
    return permute<T>(horizontal_.forward(tape, rows), {0, 1, 3, 2});
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    vertical_.collect(join_path(prefix, "proj_h"), out);
    horizontal_.collect(join_path(prefix, "proj_w"), out);
    if (options_.fusion == Fusion::concat_fc) fuse_.collect(join_path(prefix, "fuse"), out);
    for (std::size_t i = 0; i < branch_weights_.size(); ++i) {
      out.push_back({join_path(prefix, "fuse_weight" + std::to_string(i)), &branch_weights_[i]});
    }
  }

  void account(CostSink& sink, const std::string& path) const {
    vertical_.account(sink, join_path(path, "proj_h"), width_ * channels_);
    horizontal_.account(sink, join_path(path, "proj_w"), height_ * channels_);
    if (options_.fusion == Fusion::concat_fc) {
      fuse_.account(sink, join_path(path, "fuse"), height_ * width_);
    } else if (options_.fusion == Fusion::weighted_sum) {
      LayerCost c{join_path(path, "fuse_weights"), "channel_scale"};
      c.params = static_cast<std::int64_t>(branch_weights_.size() * channels_);
      sink.push_back(c);
    }
  }

  // Weights only, biases excluded.
  std::size_t weight_param_count() const {
    std::size_t n = height_ * height_ + width_ * width_;
    if (options_.fusion == Fusion::concat_fc) n += options_.branch_count() * channels_ * channels_;
    if (options_.fusion == Fusion::weighted_sum) n += options_.branch_count() * channels_;
    return n;
  }

  const SmlpOptions& options() const noexcept { return options_; }
  Linear<T>& vertical() noexcept { return vertical_; }
  Linear<T>& horizontal() noexcept { return horizontal_; }
  Linear<T>& fuse_layer() noexcept { return fuse_; }

 private:
  Var<T> fuse(Tape<T>& tape, const std::vector<Var<T>>& branches) {
    switch (options_.fusion) {
      case Fusion::concat_fc:
        return fuse_.forward(tape, branches.size() == 1 ? branches.front() : concat_last<T>(branches));
      case Fusion::sum: {
        Var<T> acc = branches.front();
        for (std::size_t i = 1; i < branches.size(); ++i) acc = add<T>(acc, branches[i]);
        return acc;
      }
      case Fusion::weighted_sum: {
        Var<T> acc = channel_scale<T>(branches.front(), tape.param(branch_weights_.front()));
        for (std::size_t i = 1; i < branches.size(); ++i) {
          acc = add<T>(acc, channel_scale<T>(branches[i], tape.param(branch_weights_[i])));
        }
        return acc;
      }
    }
    throw std::logic_error("unreachable fusion kind");
  }

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  SmlpOptions options_;
  Linear<T> vertical_;
  Linear<T> horizontal_;
  Linear<T> fuse_;
  std::vector<Parameter<T>> branch_weights_;
};

// MLP-Mixer style dense token mixing: every channel is mixed across all H*W
// tokens by Linear(HW -> alpha*HW), GeLU, Linear(alpha*HW -> HW).
template <typename T>
class DenseTokenMlp {
 public:
  DenseTokenMlp() = default;
  DenseTokenMlp(std::size_t height, std::size_t width, std::size_t channels, std::size_t alpha, Rng& rng,
                double init_std = 0.02)
      : height_(height),
        width_(width),
        channels_(channels),
        fc1_(height * width, alpha * height * width, true, rng, init_std),
        fc2_(alpha * height * width, height * width, true, rng, init_std) {}

  Var<T> forward(Tape<T>& tape, Var<T> x) {
    bool unbatched = false;
    Var<T> grid = detail::as_batched_grid(x, unbatched);
    const Shape& s = grid.shape();
    if (s.size() != 4 || s[1] != height_ || s[2] != width_ || s[3] != channels_) {
      throw ShapeError("dense token MLP built for (H, W, C) = (" + std::to_string(height_) + ", " +
                       std::to_string(width_) + ", " + std::to_string(channels_) + ") cannot process input of shape " +
                       smlp::to_string(s));
    }
    const std::size_t n = s[0];
    Var<T> tokens = reshape<T>(permute<T>(grid, {0, 3, 1, 2}), Shape{n, channels_, height_ * width_});
    Var<T> mixed = fc2_.forward(tape, gelu<T>(fc1_.forward(tape, tokens)));
    Var<T> out = permute<T>(reshape<T>(mixed, Shape{n, channels_, height_, width_}), {0, 2, 3, 1});
    if (unbatched) out = reshape<T>(out, Shape{height_, width_, channels_});
    return out;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    fc1_.collect(join_path(prefix, "fc1"), out);
    fc2_.collect(join_path(prefix, "fc2"), out);
  }

  void account(CostSink& sink, const std::string& path) const {
    fc1_.account(sink, join_path(path, "fc1"), channels_);
    fc2_.account(sink, join_path(path, "fc2"), channels_);
  }

  std::size_t weight_param_count() const {
    return fc1_.in_features() * fc1_.out_features() + fc2_.in_features() * fc2_.out_features();
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  Linear<T> fc1_;
  Linear<T> fc2_;
};

}  // namespace smlp
