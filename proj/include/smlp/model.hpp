#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "smlp/config.hpp"
#include "smlp/layers.hpp"
#include "smlp/ops.hpp"
#include "smlp/smlp_block.hpp"

namespace smlp {

// Shapes observed after each stage component during a forward pass.
struct ForwardTrace {
  struct Entry {
    std::string label;
    Shape shape;
  };
  std::vector<Entry> entries;

  void add(std::string label, const Shape& s) { entries.push_back({std::move(label), s}); }
};

// Pre-norm residual token mixing:
//   x <- x + DropPath(DWConv(BN(x)))      (when the stage keeps DWConv)
//   x <- x + DropPath(Global(BN(x)))      (sMLP or dense token MLP)
template <typename T>
class TokenMixing {
 public:
  TokenMixing() = default;
  TokenMixing(const StageConfig& stage, const ModelConfig& cfg, double droppath, Rng& rng)
      : height_(stage.height), width_(stage.width), mixer_(stage.mixer), drop_(droppath) {
    const std::size_t c = stage.channels;
    if (stage.dwconv) {
      local_norm_.emplace(NormKind::batch, c);
      dwconv_.emplace(c, true, rng, cfg.init_std);
    }
    if (mixer_ != GlobalMixer::none) global_norm_.emplace(NormKind::batch, c);
    if (mixer_ == GlobalMixer::smlp) smlp_.emplace(stage.height, stage.width, c, cfg.smlp, rng, cfg.init_std);
    if (mixer_ == GlobalMixer::dense_mlp) {
      dense_.emplace(stage.height, stage.width, c, cfg.token_mlp_alpha, rng, cfg.init_std);
    }
  }

  Var<T> forward(Tape<T>& tape, Var<T> x, Mode mode, Rng* rng) {
    if (dwconv_) {
      Var<T> local = dwconv_->forward(tape, local_norm_->forward(tape, x, mode));
      x = add<T>(x, drop_.forward(local, mode, rng));
    }
    if (mixer_ != GlobalMixer::none) {
      Var<T> normed = global_norm_->forward(tape, x, mode);
      Var<T> global = smlp_ ? smlp_->forward(tape, normed) : dense_->forward(tape, normed);
      x = add<T>(x, drop_.forward(global, mode, rng));
    }
    return x;
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    if (dwconv_) {
      local_norm_->collect(join_path(prefix, "norm_local"), out);
      dwconv_->collect(join_path(prefix, "dwconv"), out);
    }
    if (global_norm_) global_norm_->collect(join_path(prefix, "norm_global"), out);
    if (smlp_) smlp_->collect(join_path(prefix, "smlp"), out);
    if (dense_) dense_->collect(join_path(prefix, "token_mlp"), out);
  }

  void collect_buffers(const std::string& prefix, BufferList<T>& out) {
    if (local_norm_) local_norm_->collect_buffers(join_path(prefix, "norm_local"), out);
    if (global_norm_) global_norm_->collect_buffers(join_path(prefix, "norm_global"), out);
  }

  void account(CostSink& sink, const std::string& path) const {
    if (dwconv_) {
      local_norm_->account(sink, join_path(path, "norm_local"));
      dwconv_->account(sink, join_path(path, "dwconv"), height_ * width_);
    }
    if (global_norm_) global_norm_->account(sink, join_path(path, "norm_global"));
    if (smlp_) smlp_->account(sink, join_path(path, "smlp"));
    if (dense_) dense_->account(sink, join_path(path, "token_mlp"));
  }

  bool has_dwconv() const noexcept { return dwconv_.has_value(); }
  GlobalMixer mixer() const noexcept { return mixer_; }
  SmlpBlock<T>* smlp() noexcept { return smlp_ ? &*smlp_ : nullptr; }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  GlobalMixer mixer_ = GlobalMixer::none;
  DropPath<T> drop_;
  std::optional<Norm<T>> local_norm_;
  std::optional<DepthwiseConv3x3<T>> dwconv_;
  std::optional<Norm<T>> global_norm_;
  std::optional<SmlpBlock<T>> smlp_;
  std::optional<DenseTokenMlp<T>> dense_;
};

// x <- x + DropPath(Linear2(GeLU(Linear1(LN(x))))), Linear1: C -> alpha*C.
template <typename T>
class ChannelMixing {
 public:
  ChannelMixing() = default;
  ChannelMixing(std::size_t channels, std::size_t alpha, double droppath, Rng& rng, double init_std = 0.02)
      : norm_(NormKind::layer, channels),
        fc1_(channels, alpha * channels, true, rng, init_std),
        fc2_(alpha * channels, channels, true, rng, init_std),
        drop_(droppath) {}

  Var<T> forward(Tape<T>& tape, Var<T> x, Mode mode, Rng* rng) {
    Var<T> h = fc2_.forward(tape, gelu<T>(fc1_.forward(tape, norm_.forward(tape, x, mode))));
    return add<T>(x, drop_.forward(h, mode, rng));
  }

  void collect(const std::string& prefix, ParameterList<T>& out) {
    norm_.collect(join_path(prefix, "norm"), out);
    fc1_.collect(join_path(prefix, "fc1"), out);
    fc2_.collect(join_path(prefix, "fc2"), out);
  }

  void account(CostSink& sink, const std::string& path, std::size_t tokens) const {
    norm_.account(sink, join_path(path, "norm"));
    fc1_.account(sink, join_path(path, "fc1"), tokens);
    fc2_.account(sink, join_path(path, "fc2"), tokens);
  }

  std::size_t hidden_features() const noexcept { return fc1_.out_features(); }
  Linear<T>& fc2() noexcept { return fc2_; }

 private:
  Norm<T> norm_;
  Linear<T> fc1_;
  Linear<T> fc2_;
  DropPath<T> drop_;
};

// One token-mixing + channel-mixing pair.
template <typename T>
struct MixerBlock {
  TokenMixing<T> token;
  ChannelMixing<T> channel;
};

// Flattens non-overlapping patch x patch x C_in neighbourhoods and maps them
// linearly; used for the stem (patch 4, 48 -> C) and for merging (2, 4C -> 2C).
template <typename T>
class PatchProjection {
 public:
  PatchProjection() = default;
  PatchProjection(std::size_t patch, std::size_t in_channels, std::size_t out_channels, Rng& rng,
                  double init_std = 0.02)
      : patch_(patch), proj_(patch * patch * in_channels, out_channels, true, rng, init_std) {}

  Var<T> forward(Tape<T>& tape, Var<T> x) { return proj_.forward(tape, space_to_depth<T>(x, patch_)); }

  void collect(const std::string& prefix, ParameterList<T>& out) { proj_.collect(join_path(prefix, "proj"), out); }

  // `out_tokens` is the number of output positions per image.
  void account(CostSink& sink, const std::string& path, std::size_t out_tokens) const {
    proj_.account(sink, join_path(path, "proj"), out_tokens);
  }

  std::size_t patch() const noexcept { return patch_; }
  Linear<T>& projection() noexcept { return proj_; }

 private:
  std::size_t patch_ = 1;
  Linear<T> proj_;
};

template <typename T>
struct Stage {
  StageConfig config;
  std::optional<PatchProjection<T>> merge;
  std::vector<MixerBlock<T>> blocks;
};

// Pyramid network: patch embedding, stages separated by 2x2 patch merging,
// global average pooling and a linear classifier.
template <typename T>
class SmlpNet {
 public:
  explicit SmlpNet(ModelConfig config, std::uint64_t seed = 0) : config_(std::move(config)) {
    const auto stage_cfgs = config_.stages();
    Rng rng(seed);
    embed_ = PatchProjection<T>(config_.patch, 3, config_.embed_dim, rng, config_.init_std);
    const std::size_t total = config_.total_depth();
    std::size_t block_index = 0;
    for (std::size_t s = 0; s < stage_cfgs.size(); ++s) {
      Stage<T> stage;
      stage.config = stage_cfgs[s];
      if (s > 0) stage.merge.emplace(2, stage_cfgs[s - 1].channels, stage_cfgs[s].channels, rng, config_.init_std);
      for (std::size_t b = 0; b < stage.config.depth; ++b, ++block_index) {
        const double rate = total > 1 ? config_.droppath * static_cast<double>(block_index) /
                                            static_cast<double>(total - 1)
                                      : config_.droppath;
        stage.blocks.push_back(MixerBlock<T>{
            TokenMixing<T>(stage.config, config_, rate, rng),
            ChannelMixing<T>(stage.config.channels, config_.alpha, rate, rng, config_.init_std)});
      }
      stages_.push_back(std::move(stage));
    }
    head_ = Linear<T>(config_.final_channels(), config_.num_classes, true, rng, config_.init_std);
  }

  // images: (N, H, W, 3) at the configured resolution. Returns (N, num_classes).
  Var<T> forward(Tape<T>& tape, Var<T> images, Mode mode, Rng* rng = nullptr, ForwardTrace* trace = nullptr) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != config_.image_height || s[2] != config_.image_width || s[3] != 3) {
      throw ShapeError("model '" + config_.name + "' expects images of shape (N, " +
                       std::to_string(config_.image_height) + ", " + std::to_string(config_.image_width) +
                       ", 3) but got " + smlp::to_string(s) +
                       "; the token-mixing projections are fixed to the configured resolution");
    }
    Var<T> x = embed_.forward(tape, images);
    if (trace) trace->add("embed", x.shape());
    for (std::size_t si = 0; si < stages_.size(); ++si) {
      auto& stage = stages_[si];
      if (stage.merge) {
        x = stage.merge->forward(tape, x);
        if (trace) trace->add("stage" + std::to_string(si) + ".merge", x.shape());
      }
      for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
        auto& block = stage.blocks[b];
        x = block.token.forward(tape, x, mode, rng);
        if (trace) trace->add("stage" + std::to_string(si) + ".block" + std::to_string(b) + ".token", x.shape());
        x = block.channel.forward(tape, x, mode, rng);
        if (trace) trace->add("stage" + std::to_string(si) + ".block" + std::to_string(b) + ".channel", x.shape());
      }
    }
    Var<T> logits = head_.forward(tape, mean_tokens<T>(x));
    if (trace) trace->add("head", logits.shape());
    return logits;
  }

  // Eval-mode logits without recording gradients.
  Tensor<T> predict(const Tensor<T>& images) {
    Tape<T> tape(false);
    return forward(tape, tape.constant(images), Mode::eval).value();
  }

  ParameterList<T> parameters() {
    ParameterList<T> out;
    embed_.collect("embed", out);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string sp = "stages." + std::to_string(s);
      if (stages_[s].merge) stages_[s].merge->collect(join_path(sp, "merge"), out);
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        const std::string bp = sp + ".blocks." + std::to_string(b);
        stages_[s].blocks[b].token.collect(join_path(bp, "token"), out);
        stages_[s].blocks[b].channel.collect(join_path(bp, "channel"), out);
      }
    }
    head_.collect("head", out);
    return out;
  }

  BufferList<T> buffers() {
    BufferList<T> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
        stages_[s].blocks[b].token.collect_buffers("stages." + std::to_string(s) + ".blocks." + std::to_string(b) + ".token",
                                                   out);
      }
    }
    return out;
  }

  // Per-layer parameter and MAC counts at the configured resolution.
  CostSink account() const {
    CostSink sink;
    const std::size_t base_tokens = (config_.image_height / config_.patch) * (config_.image_width / config_.patch);
    embed_.account(sink, "embed", base_tokens);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const auto& st = stages_[s];
      const std::string sp = "stages." + std::to_string(s);
      const std::size_t tokens = st.config.height * st.config.width;
      if (st.merge) st.merge->account(sink, join_path(sp, "merge"), tokens);
      for (std::size_t b = 0; b < st.blocks.size(); ++b) {
        const std::string bp = sp + ".blocks." + std::to_string(b);
        st.blocks[b].token.account(sink, join_path(bp, "token"));
        st.blocks[b].channel.account(sink, join_path(bp, "channel"), tokens);
      }
    }
    head_.account(sink, "head", 1);
    return sink;
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Stage<T>>& stages() noexcept { return stages_; }
  const std::vector<Stage<T>>& stages() const noexcept { return stages_; }
  Linear<T>& head() noexcept { return head_; }

 private:
  ModelConfig config_;
  PatchProjection<T> embed_;
  std::vector<Stage<T>> stages_;
  Linear<T> head_;
};

}  // namespace smlp
