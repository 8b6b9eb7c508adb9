#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smlp/layers.hpp"
#include "smlp/model.hpp"
#include "smlp/smlp_block.hpp"
#include "smlp/variants.hpp"

namespace smlp {

// MAC convention: one multiply-accumulate is counted once. Linear layers,
// projections, and convolutions contribute; bias adds, normalization,
// activations, pooling, and elementwise fusion do not.

struct CostTotals {
  std::int64_t params = 0;
  std::int64_t bias_params = 0;
  std::int64_t macs = 0;

  std::int64_t params_without_bias() const { return params - bias_params; }

  CostTotals& operator+=(const LayerCost& c) {
    params += c.params;
    bias_params += c.bias_params;
    macs += c.macs;
    return *this;
  }
  CostTotals& operator+=(const CostTotals& c) {
    params += c.params;
    bias_params += c.bias_params;
    macs += c.macs;
    return *this;
  }
  friend bool operator==(const CostTotals&, const CostTotals&) = default;
};

struct CostReport {
  std::string model;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<LayerCost> layers;
  std::map<std::string, CostTotals> blocks;  // keyed "stages.<s>.blocks.<b>"
  std::vector<CostTotals> stages;            // merge layer included in its stage
  CostTotals embed;
  CostTotals head;
  CostTotals total;

  double params_millions() const { return static_cast<double>(total.params) / 1e6; }
  double macs_billions() const { return static_cast<double>(total.macs) / 1e9; }
};

namespace detail {

// "stages.2.blocks.5.token.smlp.fuse" -> {2, "stages.2.blocks.5"}
inline std::pair<int, std::string> locate(const std::string& path) {
  if (path.rfind("stages.", 0) != 0) return {-1, ""};
  const auto dot = path.find('.', 7);
  const int stage = std::stoi(path.substr(7, dot - 7));
  const auto bpos = path.find(".blocks.");
  if (bpos == std::string::npos) return {stage, ""};
  const auto bend = path.find('.', bpos + 8);
  return {stage, path.substr(0, bend)};
}

}  // namespace detail

inline CostReport summarize_costs(std::string model, std::size_t height, std::size_t width, std::size_t stage_count,
                                  CostSink layers) {
  CostReport r;
  r.model = std::move(model);
  r.height = height;
  r.width = width;
  r.stages.resize(stage_count);
  for (const auto& c : layers) {
    r.total += c;
    const auto [stage, block] = detail::locate(c.path);
    if (stage >= 0) {
      r.stages.at(static_cast<std::size_t>(stage)) += c;
      if (!block.empty()) r.blocks[block] += c;
    } else if (c.path.rfind("embed", 0) == 0) {
      r.embed += c;
    } else if (c.path.rfind("head", 0) == 0) {
      r.head += c;
    }
  }
  r.layers = std::move(layers);
  return r;
}

// Parameter counts come from the model's actual parameter tensors; MACs from
// the layer geometry at the configured resolution.
template <typename T>
CostReport analyze(const SmlpNet<T>& net) {
  const auto& cfg = net.config();
  return summarize_costs(cfg.name, cfg.image_height, cfg.image_width, cfg.stage_count(), net.account());
}

template <typename T>
CostReport count_params(const SmlpNet<T>& net) {
  return analyze(net);
}

template <typename T>
CostReport count_macs(const SmlpNet<T>& net, std::size_t height, std::size_t width) {
  const auto& cfg = net.config();
  if (height != cfg.image_height || width != cfg.image_width) {
    throw ShapeError("count_macs: model '" + cfg.name + "' is fixed to " + std::to_string(cfg.image_height) + "x" +
                     std::to_string(cfg.image_width) + " input, asked for " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  return analyze(net);
}

// Analysis of a named configuration; weights are left at zero since only
// their shapes matter.
inline CostReport analyze_config(ModelConfig cfg) {
  cfg.init_std = 0.0;
  SmlpNet<float> net(std::move(cfg));
  return analyze(net);
}

inline std::int64_t closed_form_smlp_macs(std::int64_t h, std::int64_t w, std::int64_t c) {
  return h * w * c * (h + w) + 3 * h * w * c * c;
}

inline std::int64_t closed_form_dense_mlp_macs(std::int64_t h, std::int64_t w, std::int64_t c, std::int64_t alpha) {
  return 2 * alpha * (h * w) * (h * w) * c;
}

inline std::int64_t closed_form_smlp_params(std::int64_t h, std::int64_t w, std::int64_t c) {
  return h * h + w * w + 3 * c * c;
}

inline std::int64_t closed_form_dense_mlp_params(std::int64_t h, std::int64_t w, std::int64_t alpha) {
  return 2 * alpha * (h * w) * (h * w);
}

// Costs of a lone token mixer (sMLP or dense MLP) at (H,W,C).
inline CostTotals lone_smlp_cost(std::size_t h, std::size_t w, std::size_t c, SmlpOptions options = {}) {
  Rng rng(0);
  SmlpBlock<float> block(h, w, c, options, rng, 0.0);
  CostSink sink;
  block.account(sink, "smlp");
  CostTotals t;
  for (const auto& e : sink) t += e;
  return t;
}

inline CostTotals lone_dense_mlp_cost(std::size_t h, std::size_t w, std::size_t c, std::size_t alpha) {
  Rng rng(0);
  DenseTokenMlp<float> mlp(h, w, c, alpha, rng, 0.0);
  CostSink sink;
  mlp.account(sink, "token_mlp");
  CostTotals t;
  for (const auto& e : sink) t += e;
  return t;
}

using TokenCoord = std::pair<std::size_t, std::size_t>;

struct ReceptiveFieldReport {
  TokenCoord source;
  std::size_t passes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<TokenCoord> influenced;  // row-major order

  bool contains(std::size_t i, std::size_t j) const {
    return std::find(influenced.begin(), influenced.end(), TokenCoord{i, j}) != influenced.end();
  }
};

// Fills every parameter with values of magnitude in [0.1, 1) and random sign.
template <typename T>
void randomize_nonzero(ParameterList<T>& params, Rng& rng) {
  for (auto& p : params) {
    for (auto& v : p.param->value.data()) {
      const double mag = 0.1 + 0.9 * uniform01(rng);
      v = static_cast<T>(uniform01(rng) < 0.5 ? -mag : mag);
    }
  }
}

// Perturbs every channel of the source token and reports which output tokens
// move by more than `threshold` after `passes` applications of `fn`.
// fn: (Tape<double>&, Var<double> grid(1,H,W,C)) -> Var<double> grid.
template <typename Fn>
ReceptiveFieldReport receptive_probe(Fn&& fn, const Tensor<double>& input, TokenCoord source, std::size_t passes,
                                     double threshold = 1e-12) {
  const auto& s = input.shape();
  if (s.size() != 4 || s[0] != 1) throw ShapeError("receptive_probe: input must be (1, H, W, C)");
  const std::size_t h = s[1], w = s[2], c = s[3];
  if (source.first >= h || source.second >= w) throw std::out_of_range("receptive_probe: source outside the grid");

  auto run = [&](const Tensor<double>& x) {
    Tape<double> tape(false);
    Var<double> v = tape.constant(x);
    for (std::size_t p = 0; p < passes; ++p) v = fn(tape, v);
    return v.value();
  };
  Tensor<double> perturbed = input;
  for (std::size_t ch = 0; ch < c; ++ch) perturbed[(source.first * w + source.second) * c + ch] += 1.0;
  const auto base = run(input);
  const auto moved = run(perturbed);

  ReceptiveFieldReport r{source, passes, h, w, {}};
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double diff = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t k = (i * w + j) * c + ch;
        diff = std::max(diff, std::abs(moved[k] - base[k]));
      }
      if (diff > threshold) r.influenced.emplace_back(i, j);
    }
  }
  return r;
}

// Probe of a default sMLP block with random nonzero weights, applied
// `passes` times.
inline ReceptiveFieldReport receptive_probe(std::size_t height, std::size_t width, TokenCoord source,
                                            std::size_t passes, std::uint64_t seed = 0, std::size_t channels = 3) {
  if (source.first >= height || source.second >= width) {
    throw std::out_of_range("receptive_probe: source (" + std::to_string(source.first) + ", " +
                            std::to_string(source.second) + ") outside " + std::to_string(height) + "x" +
                            std::to_string(width) + " grid");
  }
  Rng rng(seed);
  SmlpBlock<double> block(height, width, channels, SmlpOptions{}, rng);
  ParameterList<double> params;
  block.collect("smlp", params);
  randomize_nonzero(params, rng);
  Tensor<double> input({1, height, width, channels});
  for (auto& v : input.data()) v = 2.0 * uniform01(rng) - 1.0;
  return receptive_probe([&](Tape<double>& t, Var<double> x) { return block.forward(t, x); }, input, source, passes);
}

struct TableRow {
  std::string model;
  std::int64_t params = 0;
  std::int64_t macs = 0;
};

enum class TableFormat { text, csv };

inline TableRow table_row(const std::string& label, const CostReport& r) { return {label, r.total.params, r.total.macs}; }

inline std::string emit_table(const std::vector<TableRow>& rows, TableFormat format) {
  std::ostringstream os;
  os << std::fixed;
  if (format == TableFormat::csv) {
    os << "Model,Params(M),MACs(B)\n";
    for (const auto& r : rows) {
      os << r.model << ',' << std::setprecision(2) << static_cast<double>(r.params) / 1e6 << ','
         << std::setprecision(2) << static_cast<double>(r.macs) / 1e9 << '\n';
    }
    return os.str();
  }
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.model.size());
  os << std::left << std::setw(static_cast<int>(width)) << "Model" << "  " << std::right << std::setw(10)
     << "Params(M)" << "  " << std::setw(9) << "MACs(B)" << '\n';
  os << std::string(width + 23, '-') << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(width)) << r.model << "  " << std::right << std::setw(10)
       << std::setprecision(2) << static_cast<double>(r.params) / 1e6 << "  " << std::setw(9) << std::setprecision(2)
       << static_cast<double>(r.macs) / 1e9 << '\n';
  }
  return os.str();
}

// Standard configurations at 224x224.

inline std::vector<TableRow> main_model_rows() {
  std::vector<TableRow> rows;
  const std::array<std::pair<const char*, const char*>, 4> models{
      {{"sMLPNet-T*", "smlpnet_t_star"}, {"sMLPNet-T", "smlpnet_t"}, {"sMLPNet-S", "smlpnet_s"}, {"sMLPNet-B", "smlpnet_b"}}};
  for (const auto& [label, name] : models) rows.push_back(table_row(label, analyze_config(variant_config(name))));
  return rows;
}

inline std::vector<std::array<bool, 4>> stage_mask_sweep() {
  return {{true, true, true, true},
          {false, true, true, true},
          {false, false, true, true},
          {false, false, false, true},
          {false, false, false, false}};
}

inline std::string stage_mask_label(const std::array<bool, 4>& mask) {
  std::string s;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!mask[i]) continue;
    if (!s.empty()) s += '+';
    s += "S" + std::to_string(i + 1);
  }
  return s.empty() ? "none" : s;
}

inline std::vector<TableRow> stage_mask_rows() {
  std::vector<TableRow> rows;
  for (const auto& mask : stage_mask_sweep()) {
    VariantOverrides ov;
    ov.stage_mask = mask;
    rows.push_back(table_row("sMLP@" + stage_mask_label(mask), analyze_config(variant_config("per_stage_smlp", ov))));
  }
  return rows;
}

inline std::vector<TableRow> local_global_rows() {
  return {table_row("Local+Global", analyze_config(variant_config("smlpnet_t_star"))),
          table_row("Global only", analyze_config(variant_config("global_only"))),
          table_row("Local only", analyze_config(variant_config("local_only")))};
}

inline std::vector<TableRow> fusion_rows() {
  return {table_row("sMLPNet-S", analyze_config(variant_config("smlpnet_s"))),
          table_row("Sum", analyze_config(variant_config("fusion_sum"))),
          table_row("Weighted sum", analyze_config(variant_config("fusion_weighted_sum")))};
}

inline std::vector<TableRow> multistage_rows() {
  return {table_row("sMLPNet-T*", analyze_config(variant_config("smlpnet_t_star"))),
          table_row("Multi-stage MLP", analyze_config(variant_config("multistage_dense_mlp"))),
          table_row("Single-stage MLP", analyze_config(variant_config("singlestage_dense_mlp")))};
}

}  // namespace smlp
