#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smlp/gradcheck.hpp"
#include "smlp/model.hpp"
#include "smlp/smlp_block.hpp"
#include "smlp/variants.hpp"

// Finite-difference gradient suites shared by the CLI, the tests and the
// acceptance runner. Everything runs in double precision.
namespace smlp::verify {

struct GradcheckCase {
  std::string name;
  double tolerance = 1e-4;
  GradcheckResult result;

  bool passed() const { return result.passed(tolerance); }
};

inline constexpr double layer_tolerance = 1e-4;
inline constexpr double model_tolerance = 1e-3;

namespace detail {

inline Tensor<double> random_input(const Shape& shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = scale * (2.0 * uniform01(rng) - 1.0);
  return t;
}

// Random weights of moderate size so that every gradient is O(1) and far
// from the finite-difference noise floor.
template <typename T>
void spread_weights(ParameterList<T>& params, Rng& rng, double scale = 0.5) {
  for (auto& p : params) {
    const double center = p.param->kind == ParamKind::norm ? 1.0 : 0.0;
    for (auto& v : p.param->value.data()) v = static_cast<T>(center + scale * (2.0 * uniform01(rng) - 1.0));
  }
}

// Scalar <r, y> with a fixed random r.
inline Var<double> project(Tape<double>& tape, Var<double> y, std::uint64_t seed) {
  return sum<double>(mul<double>(y, tape.constant(random_projection(y.shape(), seed))));
}

}  // namespace detail

inline std::vector<GradcheckCase> layer_gradchecks(std::uint64_t seed = 0) {
  std::vector<GradcheckCase> out;
  Rng rng(seed);
  auto add_case = [&](std::string name, GradcheckResult r) { out.push_back({std::move(name), layer_tolerance, r}); };

  {
    Linear<double> fc(4, 5, true, rng);
    ParameterList<double> ps;
    fc.collect("linear", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, 3, 4}, rng);
    add_case("linear", gradcheck([&](Tape<double>& t, Var<double> v) { return detail::project(t, fc.forward(t, v), 1); }, x,
                                 1e-5, ps));
  }
  {
    const auto b = detail::random_input({4, 3}, rng);
    const auto x = detail::random_input({2, 4}, rng);
    add_case("matmul", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, matmul<double>(v, t.input(b)), 2);
             }, x));
  }
  {
    DepthwiseConv3x3<double> conv(3, true, rng);
    ParameterList<double> ps;
    conv.collect("dwconv", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, 4, 5, 3}, rng);
    add_case("dwconv3x3", gradcheck([&](Tape<double>& t, Var<double> v) { return detail::project(t, conv.forward(t, v), 3); },
                                    x, 1e-5, ps));
  }
  {
    Norm<double> ln(NormKind::layer, 6);
    ParameterList<double> ps;
    ln.collect("layernorm", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, 3, 4, 6}, rng);
    add_case("layer_norm", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, ln.forward(t, v, Mode::train), 4);
             }, x, 1e-5, ps));
  }
  {
    Norm<double> bn(NormKind::batch, 4);
    ParameterList<double> ps;
    bn.collect("batchnorm", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, 3, 3, 4}, rng);
    add_case("batch_norm_train", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, bn.forward(t, v, Mode::train), 5);
             }, x, 1e-5, ps));
    for (auto& m : bn.running_mean().data()) m = 2.0 * uniform01(rng) - 1.0;
    for (auto& s : bn.running_var().data()) s = 0.5 + uniform01(rng);
    add_case("batch_norm_eval", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, bn.forward(t, v, Mode::eval), 6);
             }, x, 1e-5, ps));
  }
  {
    const auto x = detail::random_input({3, 7}, rng, 3.0);
    add_case("gelu", gradcheck([&](Tape<double>& t, Var<double> v) { return detail::project(t, gelu<double>(v), 7); }, x));
  }
  {
    const auto x = detail::random_input({2, 3, 4, 5}, rng);
    add_case("permute", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, permute<double>(v, {0, 2, 3, 1}), 8);
             }, x));
  }
  {
    const auto other = detail::random_input({2, 3, 2}, rng);
    const auto x = detail::random_input({2, 3, 4}, rng);
    add_case("concat_last", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, concat_last<double>({v, t.input(other), v}), 9);
             }, x));
  }
  {
    Parameter<double> w(ParamKind::weight, detail::random_input({4}, rng));
    ParameterList<double> ps{{"channel_scale.weight", &w}};
    const auto x = detail::random_input({2, 3, 4}, rng);
    add_case("channel_scale", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, channel_scale<double>(v, t.param(w)), 10);
             }, x, 1e-5, ps));
  }
  {
    const DropPath<double> drop(0.5);
    const auto x = detail::random_input({6, 2, 2, 3}, rng);
    add_case("droppath", gradcheck([&](Tape<double>& t, Var<double> v) {
               Rng mask_rng(11);  // same mask on every evaluation
               return detail::project(t, drop.forward(v, Mode::train, &mask_rng), 11);
             }, x));
  }
  {
    const auto x = detail::random_input({2, 4, 4, 3}, rng);
    add_case("space_to_depth", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, space_to_depth<double>(v, 2), 12);
             }, x));
    add_case("mean_tokens", gradcheck([&](Tape<double>& t, Var<double> v) {
               return detail::project(t, mean_tokens<double>(v), 13);
             }, x));
  }
  {
    const std::vector<int> labels{2, 0, 4};
    const auto x = detail::random_input({3, 5}, rng, 2.0);
    add_case("label_smoothing_ce", gradcheck([&](Tape<double>&, Var<double> v) {
               return label_smoothing_ce<double>(v, labels, 0.1);
             }, x));
  }
  return out;
}

inline std::vector<GradcheckCase> block_gradchecks(std::uint64_t seed = 0) {
  std::vector<GradcheckCase> out;
  Rng rng(seed);
  const std::size_t h = 3, w = 4, c = 5;

  struct Option {
    const char* name;
    SmlpOptions options;
  };
  const std::vector<Option> options{
      {"smlp_block", {}},
      {"smlp_block.fusion_sum", {Topology::parallel, true, Fusion::sum}},
      {"smlp_block.fusion_weighted_sum", {Topology::parallel, true, Fusion::weighted_sum}},
      {"smlp_block.no_identity", {Topology::parallel, false, Fusion::concat_fc}},
      {"smlp_block.sequential_h_first", {Topology::sequential_h_first, true, Fusion::concat_fc}},
      {"smlp_block.sequential_v_first", {Topology::sequential_v_first, true, Fusion::concat_fc}},
  };
  for (const auto& opt : options) {
    SmlpBlock<double> block(h, w, c, opt.options, rng);
    ParameterList<double> ps;
    block.collect("smlp", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, h, w, c}, rng);
    out.push_back({opt.name, layer_tolerance,
                   gradcheck([&](Tape<double>& t, Var<double> v) { return detail::project(t, block.forward(t, v), 21); }, x,
                             1e-5, ps)});
  }
  {
    SmlpBlock<double> block(8, 8, 4, SmlpOptions{}, rng);
    ParameterList<double> ps;
    block.collect("smlp", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({8, 8, 4}, rng);
    out.push_back({"smlp_block_8x8x4", layer_tolerance,
                   gradcheck([&](Tape<double>& t, Var<double> v) { return detail::project(t, block.forward(t, v), 24); }, x,
                             1e-5, ps)});
  }
  {
    DenseTokenMlp<double> mlp(h, w, c, 2, rng);
    ParameterList<double> ps;
    mlp.collect("token_mlp", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, h, w, c}, rng);
    out.push_back({"dense_token_mlp", layer_tolerance,
                   gradcheck([&](Tape<double>& t, Var<double> v) { return detail::project(t, mlp.forward(t, v), 22); }, x,
                             1e-5, ps)});
  }
  {
    ModelConfig cfg;
    StageConfig stage{1, c, h, w, true, GlobalMixer::smlp};
    TokenMixing<double> token(stage, cfg, 0.0, rng);
    ChannelMixing<double> channel(c, 3, 0.0, rng);
    ParameterList<double> ps;
    token.collect("token", ps);
    channel.collect("channel", ps);
    detail::spread_weights(ps, rng);
    const auto x = detail::random_input({2, h, w, c}, rng);
    out.push_back({"mixer_block", layer_tolerance, gradcheck([&](Tape<double>& t, Var<double> v) {
                     Var<double> y = token.forward(t, v, Mode::train, nullptr);
                     return detail::project(t, channel.forward(t, y, Mode::train, nullptr), 23);
                   }, x, 1e-5, ps)});
  }
  return out;
}

// Four-stage toy network on a (2, res, res, 3) batch; `max_coords` samples
// coordinates per tensor to bound the run time.
inline GradcheckCase model_gradcheck(std::size_t resolution = 16, std::uint64_t seed = 0, std::size_t max_coords = 24) {
  ModelConfig cfg;
  cfg.name = "gradcheck_toy";
  cfg.image_height = cfg.image_width = resolution;
  cfg.patch = 2;
  cfg.embed_dim = 4;
  cfg.depths = {1, 1, 1, 1};
  cfg.alpha = 2;
  cfg.num_classes = 2;
  SmlpNet<double> net(cfg, seed);
  auto ps = net.parameters();
  Rng rng(seed + 1);
  detail::spread_weights(ps, rng, 0.3);
  const auto x = detail::random_input({2, resolution, resolution, 3}, rng);
  const std::vector<int> labels{1, 0};
  auto r = gradcheck([&](Tape<double>& t, Var<double> v) {
    return label_smoothing_ce<double>(net.forward(t, v, Mode::train), labels, 0.1);
  }, x, 1e-5, ps, max_coords, seed);
  return {"model_" + std::to_string(resolution) + "x" + std::to_string(resolution), model_tolerance, r};
}

// sMLPNet-T with its input scaled to res x res, eval-mode batch norm, one
// logit as the scalar. Only every `tensor_stride`-th parameter tensor is
// probed, at `max_coords` coordinates each.
inline GradcheckCase smlpnet_t_gradcheck(std::size_t resolution = 32, std::uint64_t seed = 0,
                                         std::size_t tensor_stride = 16, std::size_t max_coords = 2) {
  VariantOverrides ov;
  ov.resolution = resolution;
  SmlpNet<double> net(variant_config("smlpnet_t", ov), seed);
  auto all = net.parameters();
  Rng rng(seed + 1);
  for (auto& b : net.buffers()) {
    const bool var = b.name.ends_with("running_var");
    for (auto& v : b.tensor->data()) v = var ? 0.5 + uniform01(rng) : 0.2 * (2.0 * uniform01(rng) - 1.0);
  }
  ParameterList<double> probed;
  for (std::size_t i = 0; i < all.size(); i += tensor_stride) probed.push_back(all[i]);
  probed.push_back(all.back());
  const auto x = detail::random_input({1, resolution, resolution, 3}, rng);
  auto r = gradcheck([&](Tape<double>& t, Var<double> v) {
    Var<double> logits = net.forward(t, v, Mode::eval);
    Tensor<double> pick(logits.shape());
    pick[3] = 1.0;
    return sum<double>(mul<double>(logits, t.constant(std::move(pick))));
  }, x, 1e-5, probed, max_coords, seed);
  return {"smlpnet_t_" + std::to_string(resolution) + "x" + std::to_string(resolution), model_tolerance, r};
}

}  // namespace smlp::verify
