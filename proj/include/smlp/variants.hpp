#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "smlp/config.hpp"
#include "smlp/model.hpp"

namespace smlp {

// Optional adjustments applied on top of a named configuration.
struct VariantOverrides {
  std::optional<std::size_t> resolution;
  std::optional<std::size_t> num_classes;
  std::optional<std::size_t> alpha;
  std::optional<std::size_t> embed_dim;
  std::optional<std::vector<std::size_t>> depths;
  std::optional<double> droppath;
  std::optional<std::size_t> patch;
  std::optional<std::size_t> token_mlp_alpha;
  // Which of the four stages keep their sMLP (per_stage_smlp).
  std::optional<std::array<bool, 4>> stage_mask;
  // Sequential variant: keep the identity branch / mix vertically first.
  std::optional<bool> identity;
  std::optional<bool> vertical_first;
};

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{
      "smlpnet_t_star", "smlpnet_t",           "smlpnet_s",  "smlpnet_b",
      "local_only",     "global_only",         "per_stage_smlp",
      "fusion_sum",     "fusion_weighted_sum", "sequential", "parallel_no_identity",
      "multistage_dense_mlp", "singlestage_dense_mlp"};
  return names;
}

// Accepts hyphens and a trailing '*' (smlpnet-t* == smlpnet_t_star).
inline std::string normalize_variant_name(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char ch) {
    return ch == '-' ? '_' : static_cast<char>(std::tolower(ch));
  });
  if (!name.empty() && name.back() == '*') name = name.substr(0, name.size() - 1) + "_star";
  return name;
}

namespace detail {

inline ModelConfig tiny_base(std::string name, std::size_t alpha) {
  ModelConfig c;
  c.name = std::move(name);
  c.embed_dim = 80;
  c.depths = {2, 8, 14, 2};
  c.alpha = alpha;
  return c;
}

inline ModelConfig small_base(std::string name) {
  ModelConfig c;
  c.name = std::move(name);
  c.embed_dim = 96;
  c.depths = {2, 10, 24, 2};
  c.alpha = 3;
  c.droppath = 0.2;
  return c;
}

inline ModelConfig base_base(std::string name) {
  ModelConfig c;
  c.name = std::move(name);
  c.embed_dim = 112;
  c.depths = {2, 10, 24, 2};
  c.alpha = 3;
  c.droppath = 0.3;
  return c;
}

}  // namespace detail

// Structural configuration of a named model or ablation variant.
inline ModelConfig variant_config(const std::string& raw_name, const VariantOverrides& ov = {}) {
  const std::string name = normalize_variant_name(raw_name);
  ModelConfig c;
  if (name == "smlpnet_t_star") {
    c = detail::tiny_base(name, 2);
  } else if (name == "smlpnet_t") {
    c = detail::tiny_base(name, 3);
  } else if (name == "smlpnet_s") {
    c = detail::small_base(name);
  } else if (name == "smlpnet_b") {
    c = detail::base_base(name);
  } else if (name == "local_only") {
    // DWConv only; width raised to 112 to keep size comparable.
    c = detail::tiny_base(name, 2);
    c.embed_dim = 112;
    c.mixers.assign(4, GlobalMixer::none);
  } else if (name == "global_only") {
    c = detail::tiny_base(name, 2);
    c.dwconv.assign(4, false);
  } else if (name == "per_stage_smlp") {
    c = detail::base_base(name);
    const std::array<bool, 4> mask = ov.stage_mask.value_or(std::array<bool, 4>{true, true, true, true});
    for (std::size_t i = 0; i < 4; ++i) c.mixers[i] = mask[i] ? GlobalMixer::smlp : GlobalMixer::none;
  } else if (name == "fusion_sum") {
    c = detail::small_base(name);
    c.smlp.fusion = Fusion::sum;
  } else if (name == "fusion_weighted_sum") {
    c = detail::small_base(name);
    c.smlp.fusion = Fusion::weighted_sum;
  } else if (name == "sequential") {
    c = detail::tiny_base(name, 2);
    c.smlp.topology = ov.vertical_first.value_or(false) ? Topology::sequential_v_first : Topology::sequential_h_first;
    c.smlp.identity = ov.identity.value_or(true);
  } else if (name == "parallel_no_identity") {
    c = detail::tiny_base(name, 2);
    c.smlp.identity = false;
  } else if (name == "multistage_dense_mlp") {
    // Stage 1 keeps only DWConv; stages 2-4 replace sMLP by a dense token MLP.
    c = detail::tiny_base(name, 2);
    c.mixers = {GlobalMixer::none, GlobalMixer::dense_mlp, GlobalMixer::dense_mlp, GlobalMixer::dense_mlp};
    c.token_mlp_alpha = 1;
  } else if (name == "singlestage_dense_mlp") {
    // One 14x14 stage (patch 16) with the summed depth of the tiny model.
    c = detail::tiny_base(name, 2);
    c.single_stage = true;
    c.patch = 16;
    c.embed_dim = 512;
    c.depths = {26};
    c.mixers = {GlobalMixer::dense_mlp};
    c.dwconv = {true};
    c.token_mlp_alpha = 1;
  } else {
    std::string known;
    for (const auto& n : variant_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown model variant '" + raw_name + "' (known: " + known + ")");
  }

  if (ov.resolution) c.image_height = c.image_width = *ov.resolution;
  if (ov.num_classes) c.num_classes = *ov.num_classes;
  if (ov.alpha) c.alpha = *ov.alpha;
  if (ov.embed_dim) c.embed_dim = *ov.embed_dim;
  if (ov.depths) c.depths = *ov.depths;
  if (ov.droppath) c.droppath = *ov.droppath;
  if (ov.patch) c.patch = *ov.patch;
  if (ov.token_mlp_alpha) c.token_mlp_alpha = *ov.token_mlp_alpha;
  c.validate();
  return c;
}

template <typename T = float>
SmlpNet<T> build_variant(const std::string& name, const VariantOverrides& overrides = {}, std::uint64_t seed = 0) {
  return SmlpNet<T>(variant_config(name, overrides), seed);
}

}  // namespace smlp
