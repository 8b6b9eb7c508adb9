#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "smlp/tensor.hpp"

namespace smlp {

// Global (non-local) token mixer of a stage.
enum class GlobalMixer { smlp, dense_mlp, none };

// How the two axial projections are connected inside an sMLP block.
enum class Topology { parallel, sequential_h_first, sequential_v_first };

enum class Fusion { concat_fc, sum, weighted_sum };

struct SmlpOptions {
  Topology topology = Topology::parallel;
  bool identity = true;
  Fusion fusion = Fusion::concat_fc;

  // Number of tensors entering the fusion step.
  std::size_t branch_count() const { return (topology == Topology::parallel ? 2 : 1) + (identity ? 1 : 0); }

  friend bool operator==(const SmlpOptions&, const SmlpOptions&) = default;
};

struct StageConfig {
  std::size_t depth = 0;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool dwconv = true;
  GlobalMixer mixer = GlobalMixer::smlp;

  bool has_smlp() const { return mixer == GlobalMixer::smlp; }
};

inline std::string to_string(GlobalMixer m) {
  switch (m) {
    case GlobalMixer::smlp: return "smlp";
    case GlobalMixer::dense_mlp: return "dense_mlp";
    case GlobalMixer::none: return "none";
  }
  return "?";
}

inline std::string to_string(Topology t) {
  switch (t) {
    case Topology::parallel: return "parallel";
    case Topology::sequential_h_first: return "sequential_h_first";
    case Topology::sequential_v_first: return "sequential_v_first";
  }
  return "?";
}

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::concat_fc: return "concat_fc";
    case Fusion::sum: return "sum";
    case Fusion::weighted_sum: return "weighted_sum";
  }
  return "?";
}

inline GlobalMixer parse_global_mixer(const std::string& s) {
  if (s == "smlp") return GlobalMixer::smlp;
  if (s == "dense_mlp") return GlobalMixer::dense_mlp;
  if (s == "none") return GlobalMixer::none;
  throw ConfigError("unknown token mixer '" + s + "' (expected smlp, dense_mlp or none)");
}

inline Topology parse_topology(const std::string& s) {
  if (s == "parallel") return Topology::parallel;
  if (s == "sequential_h_first") return Topology::sequential_h_first;
  if (s == "sequential_v_first") return Topology::sequential_v_first;
  throw ConfigError("unknown topology '" + s + "'");
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "concat_fc") return Fusion::concat_fc;
  if (s == "sum") return Fusion::sum;
  if (s == "weighted_sum") return Fusion::weighted_sum;
  throw ConfigError("unknown fusion '" + s + "'");
}

// Structural description of a network. Multi-stage models have four entries
// in depths/mixers/dwconv; single-stage models have one.
struct ModelConfig {
  std::string name = "custom";
  std::size_t image_height = 224;
  std::size_t image_width = 224;
  std::size_t patch = 4;
  std::size_t embed_dim = 80;
  std::vector<std::size_t> depths{2, 8, 14, 2};
  std::size_t alpha = 3;
  std::size_t token_mlp_alpha = 1;
  std::size_t num_classes = 1000;
  double droppath = 0.0;
  bool single_stage = false;
  std::vector<GlobalMixer> mixers{GlobalMixer::smlp, GlobalMixer::smlp, GlobalMixer::smlp, GlobalMixer::smlp};
  std::vector<bool> dwconv{true, true, true, true};
  SmlpOptions smlp;
  double init_std = 0.02;

  std::size_t stage_count() const { return single_stage ? 1 : 4; }

  void validate() const {
    const std::size_t n = stage_count();
    if (depths.size() != n || mixers.size() != n || dwconv.size() != n) {
      throw ConfigError("model '" + name + "': expected " + std::to_string(n) +
                        " entries for depths, mixers and dwconv");
    }
    if (patch == 0 || embed_dim == 0 || alpha == 0 || token_mlp_alpha == 0 || num_classes == 0) {
      throw ConfigError("model '" + name + "': patch, embed_dim, alpha, token_mlp_alpha and num_classes must be positive");
    }
    if (std::any_of(depths.begin(), depths.end(), [](std::size_t d) { return d == 0; })) {
      throw ConfigError("model '" + name + "': every stage needs at least one block");
    }
    if (!(droppath >= 0.0 && droppath < 1.0)) throw ConfigError("model '" + name + "': droppath must lie in [0, 1)");
    const std::size_t divisor = patch << (n - 1);
    if (image_height == 0 || image_width == 0 || image_height % divisor != 0 || image_width % divisor != 0) {
      throw ConfigError("model '" + name + "': input " + std::to_string(image_height) + "x" +
                        std::to_string(image_width) + " must be divisible by " + std::to_string(divisor));
    }
  }

  std::vector<StageConfig> stages() const {
    validate();
    std::vector<StageConfig> out;
    std::size_t h = image_height / patch, w = image_width / patch, c = embed_dim;
    for (std::size_t i = 0; i < stage_count(); ++i) {
      out.push_back(StageConfig{depths[i], c, h, w, dwconv[i], mixers[i]});
      h /= 2;
      w /= 2;
      c *= 2;
    }
    return out;
  }

  std::size_t total_depth() const {
    std::size_t d = 0;
    for (auto x : depths) d += x;
    return d;
  }

  std::size_t final_channels() const { return embed_dim << (stage_count() - 1); }
};

}  // namespace smlp
