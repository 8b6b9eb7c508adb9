#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "smlp/analyzer.hpp"
#include "smlp/model.hpp"
#include "smlp/smlp_block.hpp"
#include "smlp/variants.hpp"
#include "smlp/verification.hpp"

using namespace smlp;

namespace {

Tensor<double> random_tensor(const Shape& shape, Rng& rng) {
  Tensor<double> t(shape);
  for (auto& v : t.data()) v = 2.0 * uniform01(rng) - 1.0;
  return t;
}

template <typename T>
void randomize(ParameterList<T>& ps, Rng& rng) {
  for (auto& p : ps)
    for (auto& v : p.param->value.data()) v = static_cast<T>(2.0 * uniform01(rng) - 1.0);
}

template <typename Block>
Tensor<double> run(Block& block, const Tensor<double>& x) {
  Tape<double> tape(false);
  return block.forward(tape, tape.constant(x)).value();
}

std::size_t count_values(const ParameterList<double>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.param->value.size();
  return n;
}

}  // namespace

TEST(SmlpBlock, ZeroInputWithZeroBiasesGivesZero) {
  Rng rng(0);
  SmlpBlock<double> block(4, 5, 3, {}, rng);
  EXPECT_EQ(run(block, Tensor<double>({2, 4, 5, 3})), Tensor<double>({2, 4, 5, 3}));
}

TEST(SmlpBlock, IdentityProjectionsAverageThreeCopies) {
  Rng rng(0);
  SmlpBlock<double> block(2, 2, 1, {}, rng);
  block.vertical().weight().value = Tensor<double>({2, 2}, {1, 0, 0, 1});
  block.horizontal().weight().value = Tensor<double>({2, 2}, {1, 0, 0, 1});
  block.fuse_layer().weight().value = Tensor<double>({1, 3}, 1.0 / 3.0);
  const Tensor<double> x({1, 2, 2, 1}, {1, 2, 3, 4});
  const auto y = run(block, x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i], 1e-15);
}

TEST(SmlpBlock, AgreesWithLoopOracle) {
  const std::size_t n = 2, h = 3, w = 4, c = 2;
  Rng rng(5);
  SmlpBlock<double> block(h, w, c, {}, rng);
  ParameterList<double> ps;
  block.collect("", ps);
  randomize(ps, rng);
  const auto x = random_tensor({n, h, w, c}, rng);
  const auto& wv = block.vertical().weight().value;
  const auto& bv = block.vertical().bias().value;
  const auto& wh = block.horizontal().weight().value;
  const auto& bh = block.horizontal().bias().value;
  const auto& wf = block.fuse_layer().weight().value;
  const auto& bf = block.fuse_layer().bias().value;

  const auto y = run(block, x);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        std::vector<double> cat(3 * c);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double xh = bv[i], xw = bh[j];
          for (std::size_t k = 0; k < h; ++k) xh += wv.at({i, k}) * x.at({b, k, j, ch});
          for (std::size_t k = 0; k < w; ++k) xw += wh.at({j, k}) * x.at({b, i, k, ch});
          cat[ch] = xh;
          cat[c + ch] = xw;
          cat[2 * c + ch] = x.at({b, i, j, ch});
        }
        for (std::size_t o = 0; o < c; ++o) {
          double s = bf[o];
          for (std::size_t k = 0; k < 3 * c; ++k) s += wf.at({o, k}) * cat[k];
          EXPECT_NEAR(y.at({b, i, j, o}), s, 1e-12);
        }
      }
}

TEST(SmlpBlock, UnbatchedInputKeepsRank) {
  Rng rng(1);
  SmlpBlock<double> block(3, 4, 2, {}, rng);
  const auto x = random_tensor({3, 4, 2}, rng);
  EXPECT_EQ(run(block, x).shape(), (Shape{3, 4, 2}));
}

TEST(SmlpBlock, ResolutionMismatchIsAnError) {
  Rng rng(0);
  SmlpBlock<double> block(4, 4, 2, {}, rng);
  try {
    run(block, Tensor<double>({1, 5, 4, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("resolution"), std::string::npos);
  }
}

TEST(SmlpBlock, WeightCountMatchesClosedForm) {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const auto h = 1 + static_cast<std::size_t>(uniform01(rng) * 64);
    const auto w = 1 + static_cast<std::size_t>(uniform01(rng) * 64);
    const auto c = 1 + static_cast<std::size_t>(uniform01(rng) * 64);
    const auto cost = lone_smlp_cost(h, w, c);
    const auto expected = static_cast<std::int64_t>(h * h + w * w + 3 * c * c);
    EXPECT_EQ(cost.params_without_bias(), expected) << h << "x" << w << "x" << c;
    EXPECT_EQ(closed_form_smlp_params(h, w, c), expected);
  }
}

TEST(SmlpBlock, OnePassReachesRowAndColumn) {
  const auto r = receptive_probe(5, 7, {2, 3}, 1, 11);
  std::vector<TokenCoord> expected;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j)
      if (i == 2 || j == 3) expected.emplace_back(i, j);
  EXPECT_EQ(r.influenced, expected);
}

TEST(SmlpBlock, TwoPassesReachEveryToken) {
  const auto r = receptive_probe(6, 4, {0, 3}, 2, 12);
  EXPECT_EQ(r.influenced.size(), 24u);
}

TEST(SmlpBlock, RowMixingCommutesWithRowPermutation) {
  const std::size_t h = 5, w = 4, c = 3;
  Rng rng(8);
  SmlpBlock<double> block(h, w, c, {}, rng);
  ParameterList<double> ps;
  block.collect("", ps);
  randomize(ps, rng);
  const auto x = random_tensor({1, h, w, c}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  Tensor<double> xp(x.shape());
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) xp.at({0, i, j, ch}) = x.at({0, perm[i], j, ch});

  Tape<double> tape(false);
  const auto direct = block.mix_horizontal(tape, tape.constant(x)).value();
  const auto permuted = block.mix_horizontal(tape, tape.constant(xp)).value();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) EXPECT_EQ(permuted.at({0, i, j, ch}), direct.at({0, perm[i], j, ch}));
}

TEST(SmlpBlock, SequentialOrdersDiffer) {
  Rng a(3), b(3), rng(4);
  SmlpBlock<double> hv(4, 4, 2, {Topology::sequential_h_first, true, Fusion::concat_fc}, a);
  SmlpBlock<double> vh(4, 4, 2, {Topology::sequential_v_first, true, Fusion::concat_fc}, b);
  ParameterList<double> pa, pb;
  hv.collect("", pa);
  vh.collect("", pb);
  Rng wa(9), wb(9);
  randomize(pa, wa);
  randomize(pb, wb);
  const auto x = random_tensor({1, 4, 4, 2}, rng);
  const auto ya = run(hv, x), yb = run(vh, x);
  double diff = 0.0;
  for (std::size_t i = 0; i < ya.size(); ++i) diff = std::max(diff, std::abs(ya[i] - yb[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(SmlpBlock, FusionVariantsCarryExpectedParameters) {
  Rng rng(0);
  SmlpBlock<double> sum_block(3, 4, 5, {Topology::parallel, true, Fusion::sum}, rng);
  SmlpBlock<double> weighted(3, 4, 5, {Topology::parallel, true, Fusion::weighted_sum}, rng);
  SmlpBlock<double> no_id(3, 4, 5, {Topology::parallel, false, Fusion::concat_fc}, rng);
  EXPECT_EQ(sum_block.weight_param_count(), 9u + 16u);
  EXPECT_EQ(weighted.weight_param_count(), 9u + 16u + 15u);
  EXPECT_EQ(no_id.weight_param_count(), 9u + 16u + 50u);
}

TEST(TokenMixing, ZeroInitIsIdentity) {
  ModelConfig cfg;
  cfg.init_std = 0.0;
  StageConfig stage{1, 4, 3, 3, true, GlobalMixer::smlp};
  Rng rng(0);
  TokenMixing<double> token(stage, cfg, 0.0, rng);
  const auto x = random_tensor({2, 3, 3, 4}, rng);
  Tape<double> tape(false);
  EXPECT_EQ(token.forward(tape, tape.constant(x), Mode::eval, nullptr).value(), x);
}

TEST(TokenMixing, LocalAndGlobalOptions) {
  ModelConfig cfg;
  Rng rng(0);
  TokenMixing<double> local(StageConfig{1, 4, 3, 3, true, GlobalMixer::none}, cfg, 0.0, rng);
  TokenMixing<double> global(StageConfig{1, 4, 3, 3, false, GlobalMixer::smlp}, cfg, 0.0, rng);
  EXPECT_TRUE(local.has_dwconv());
  EXPECT_EQ(local.mixer(), GlobalMixer::none);
  EXPECT_EQ(local.smlp(), nullptr);
  EXPECT_FALSE(global.has_dwconv());
  EXPECT_NE(global.smlp(), nullptr);
  ParameterList<double> pl, pg;
  local.collect("", pl);
  global.collect("", pg);
  EXPECT_EQ(count_values(pl), 2u * 4 + 9u * 4 + 4u);                     // BN + kernel + bias
  EXPECT_EQ(count_values(pg), 2u * 4 + (9u + 3) * 2 + (12u * 4 + 4));  // BN + projections + fuse
}

TEST(ChannelMixing, HiddenWidthAndParameterCount) {
  Rng rng(0);
  const std::size_t c = 80, alpha = 3;
  ChannelMixing<double> mix(c, alpha, 0.0, rng);
  EXPECT_EQ(mix.hidden_features(), 240u);
  ParameterList<double> ps;
  mix.collect("", ps);
  EXPECT_EQ(count_values(ps), 2 * alpha * c * c + alpha * c + c + 2 * c);
}

TEST(PatchProjection, EmbeddingShapes) {
  Rng rng(0);
  PatchProjection<float> embed(4, 3, 80, rng);
  Tape<float> tape(false);
  EXPECT_EQ(embed.forward(tape, tape.constant(Tensor<float>({1, 224, 224, 3}))).shape(), (Shape{1, 56, 56, 80}));
  EXPECT_EQ(embed.forward(tape, tape.constant(Tensor<float>({2, 32, 32, 3}))).shape(), (Shape{2, 8, 8, 80}));
  EXPECT_THROW(embed.forward(tape, tape.constant(Tensor<float>({1, 225, 225, 3}))), ShapeError);
}

TEST(PatchProjection, MergeHalvesResolutionDoublesChannels) {
  Rng rng(0);
  PatchProjection<float> merge(2, 80, 160, rng);
  Tape<float> tape(false);
  EXPECT_EQ(merge.forward(tape, tape.constant(Tensor<float>({1, 56, 56, 80}))).shape(), (Shape{1, 28, 28, 160}));
  EXPECT_THROW(merge.forward(tape, tape.constant(Tensor<float>({1, 3, 3, 80}))), ShapeError);
}

TEST(PatchProjection, MergeGathersNeighbourhoodInRowMajorOrder) {
  // (1, 2, 2, 1) grid {1, 2, 3, 4}; a projection that picks input k returns
  // the k-th element of the (dy, dx) ordered neighbourhood.
  Rng rng(0);
  PatchProjection<double> merge(2, 1, 4, rng);
  merge.projection().weight().value = Tensor<double>({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tape<double> tape(false);
  const auto y = merge.forward(tape, tape.constant(Tensor<double>({1, 2, 2, 1}, {1, 2, 3, 4}))).value();
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 4}));
  EXPECT_EQ(y.storage(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(SmlpNet, TinyModelStageShapesAt224) {
  auto net = build_variant<float>("smlpnet_t");
  ForwardTrace trace;
  Tape<float> tape(false);
  const auto logits = net.forward(tape, tape.constant(Tensor<float>({1, 224, 224, 3}, 0.5f)), Mode::eval, nullptr, &trace);
  EXPECT_EQ(logits.shape(), (Shape{1, 1000}));
  const std::vector<Shape> stage_shapes{{1, 56, 56, 80}, {1, 28, 28, 160}, {1, 14, 14, 320}, {1, 7, 7, 640}};
  for (const auto& e : trace.entries) {
    if (e.label.find(".block") == std::string::npos) continue;
    const auto s = static_cast<std::size_t>(e.label[5] - '0');
    EXPECT_EQ(e.shape, stage_shapes.at(s)) << e.label;
  }
  EXPECT_EQ(trace.entries.back().label, "head");
}

TEST(SmlpNet, CifarConfigGivesTenLogits) {
  VariantOverrides ov;
  ov.resolution = 32;
  ov.num_classes = 10;
  ov.embed_dim = 16;
  ov.depths = std::vector<std::size_t>{1, 1, 1, 1};
  auto net = build_variant<float>("smlpnet_t", ov);
  EXPECT_EQ(net.predict(Tensor<float>({3, 32, 32, 3})).shape(), (Shape{3, 10}));
  EXPECT_THROW(net.predict(Tensor<float>({1, 64, 64, 3})), ShapeError);
}

TEST(SmlpNet, OffResolutionInputIsAnError) {
  auto net = build_variant<float>("smlpnet_t");
  try {
    net.predict(Tensor<float>({1, 256, 256, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("224"), std::string::npos);
  }
}

TEST(SmlpNet, DropPathRampsLinearly) {
  auto cfg = variant_config("smlpnet_t", VariantOverrides{.resolution = 32, .depths = std::vector<std::size_t>{1, 1, 1, 1}});
  cfg.droppath = 0.3;
  EXPECT_NO_THROW(SmlpNet<float>(cfg, 0));
  cfg.droppath = 1.0;
  EXPECT_THROW(SmlpNet<float>(cfg, 0), ConfigError);
}

TEST(Variants, EveryNameConstructs) {
  for (const auto& name : variant_names()) {
    const auto cfg = variant_config(name);
    EXPECT_NO_THROW(cfg.validate()) << name;
    EXPECT_GT(analyze_config(cfg).total.params, 0) << name;
  }
  EXPECT_EQ(normalize_variant_name("sMLPNet-T*"), "smlpnet_t_star");
}

TEST(Variants, UnknownNameIsAnError) {
  try {
    variant_config("nosuch");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("smlpnet_t"), std::string::npos);
  }
}

TEST(BlockGradients, AllBlocksPassFiniteDifferences) {
  for (const auto& c : verify::block_gradchecks(0)) {
    EXPECT_TRUE(c.passed()) << c.name << " max rel error " << c.result.max_rel_error;
  }
}

TEST(ModelGradients, ToyModelAt16) {
  const auto c = verify::model_gradcheck(16, 0);
  EXPECT_TRUE(c.passed()) << c.result.max_rel_error;
}

TEST(ModelGradients, TinyModelAt32) {
  const auto c = verify::smlpnet_t_gradcheck(32, 0);
  EXPECT_TRUE(c.passed()) << c.result.max_rel_error;
}
