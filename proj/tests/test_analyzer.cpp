#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "smlp/analyzer.hpp"

using namespace smlp;

namespace {

double within(double value, double target) { return std::abs(value - target) / target; }

}  // namespace

TEST(ParamCount, MainModelsNearPublishedSizes) {
  EXPECT_LT(within(analyze_config(variant_config("smlpnet_t_star")).params_millions(), 19.2), 0.02);
  EXPECT_LT(within(analyze_config(variant_config("smlpnet_t")).params_millions(), 24.1), 0.02);
  EXPECT_LT(within(analyze_config(variant_config("smlpnet_b")).params_millions(), 65.9), 0.02);
}

TEST(ParamCount, CountsEveryParameterTensor) {
  SmlpNet<float> net(variant_config("smlpnet_t_star"));
  std::int64_t direct = 0;
  for (const auto& p : net.parameters()) direct += static_cast<std::int64_t>(p.param->value.size());
  EXPECT_EQ(analyze(net).total.params, direct);
}

TEST(ParamCount, LoneBlockWithoutBiases) {
  // 56^2 + 56^2 + 3 * 80^2 = 3136 + 3136 + 19200
  EXPECT_EQ(lone_smlp_cost(56, 56, 80).params_without_bias(), 25472);
}

TEST(MacCount, LoneBlockAt56) {
  // 3136 * 80 * 112 + 3 * 3136 * 6400 = 28,098,560 + 60,211,200
  EXPECT_EQ(lone_smlp_cost(56, 56, 80).macs, 88309760);
  EXPECT_EQ(closed_form_smlp_macs(56, 56, 80), 88309760);
}

TEST(MacCount, MainModelsNearPublishedCosts) {
  EXPECT_LT(within(analyze_config(variant_config("smlpnet_t_star")).macs_billions(), 4.0), 0.05);
  EXPECT_LT(within(analyze_config(variant_config("smlpnet_t")).macs_billions(), 5.0), 0.05);
}

TEST(MacCount, ResolutionMismatchIsAnError) {
  SmlpNet<float> net(variant_config("smlpnet_t_star"));
  EXPECT_NO_THROW(count_macs(net, 224, 224));
  EXPECT_THROW(count_macs(net, 256, 256), ShapeError);
}

TEST(ClosedForm, UnitCases) {
  EXPECT_EQ(closed_form_smlp_macs(1, 1, 1), 5);
  EXPECT_EQ(closed_form_dense_mlp_macs(1, 1, 1, 4), 8);
  EXPECT_EQ(closed_form_dense_mlp_macs(56, 56, 80, 4), 6294077440);
}

TEST(ClosedForm, DenseToSparseRatio) {
  const double dense = static_cast<double>(closed_form_dense_mlp_params(56, 56, 4));
  EXPECT_EQ(closed_form_dense_mlp_params(56, 56, 4), 78675968);
  const double ratio = dense / static_cast<double>(closed_form_smlp_params(56, 56, 80));
  EXPECT_NEAR(ratio, 3088.72, 0.01);
}

TEST(ClosedForm, CountedCostsMatchForRandomExtents) {
  Rng rng(21);
  auto draw = [&](std::size_t hi) { return 1 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(hi)); };
  for (int trial = 0; trial < 30; ++trial) {
    const auto h = draw(64), w = draw(64), c = draw(64), a = draw(4);
    const auto hi = static_cast<std::int64_t>(h), wi = static_cast<std::int64_t>(w), ci = static_cast<std::int64_t>(c);
    EXPECT_EQ(lone_smlp_cost(h, w, c).macs, closed_form_smlp_macs(hi, wi, ci));
    EXPECT_EQ(lone_dense_mlp_cost(h, w, c, a).macs, closed_form_dense_mlp_macs(hi, wi, ci, static_cast<std::int64_t>(a)));
  }
}

TEST(Sweep, RemovingSmlpStagesShrinksTheModel) {
  const auto rows = stage_mask_rows();
  ASSERT_EQ(rows.size(), 5u);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_LT(rows[i].params, rows[i - 1].params);
    EXPECT_LT(rows[i].macs, rows[i - 1].macs);
  }
}

TEST(Table, CsvHasHeaderAndOneLinePerRow) {
  const auto csv = emit_table(main_model_rows(), TableFormat::csv);
  std::istringstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "Model,Params(M),MACs(B)");
  EXPECT_EQ(lines[2].rfind("sMLPNet-T,24.1", 0), 0u);
  EXPECT_EQ(emit_table({}, TableFormat::csv), "Model,Params(M),MACs(B)\n");
}

TEST(Table, TextAlignsColumns) {
  const auto text = emit_table({{"a", 1500000, 2000000000}}, TableFormat::text);
  EXPECT_NE(text.find("1.50"), std::string::npos);
  EXPECT_NE(text.find("2.00"), std::string::npos);
}

TEST(Probe, SingleTokenGrid) {
  const auto r = receptive_probe(1, 1, {0, 0}, 1);
  EXPECT_EQ(r.influenced, (std::vector<TokenCoord>{{0, 0}}));
  EXPECT_THROW(receptive_probe(3, 3, {3, 0}, 1), std::out_of_range);
}

TEST(Analyzer, Deterministic) {
  const auto a = analyze_config(variant_config("smlpnet_s"));
  const auto b = analyze_config(variant_config("smlpnet_s"));
  EXPECT_EQ(a.total, b.total);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  CostTotals stage_sum = a.embed;
  for (const auto& s : a.stages) stage_sum += s;
  stage_sum += a.head;
  EXPECT_EQ(stage_sum, a.total);
}
