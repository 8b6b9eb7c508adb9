#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "smlp/checkpoint.hpp"
#include "smlp/config_io.hpp"
#include "smlp/data.hpp"
#include "smlp/optim.hpp"
#include "smlp/trainer.hpp"
#include "smlp/variants.hpp"

using namespace smlp;

namespace {

ModelConfig small_model(std::size_t classes = 10) {
  ModelConfig cfg;
  cfg.name = "test_small";
  cfg.image_height = cfg.image_width = 32;
  cfg.patch = 4;
  cfg.embed_dim = 8;
  cfg.depths = {1, 1, 1, 1};
  cfg.alpha = 2;
  cfg.num_classes = classes;
  return cfg;
}

// Runs one AdamW step on a single parameter with the given gradient.
double adam_after(ParamKind kind, double w0, double g, double lr, double wd, int steps = 1) {
  Parameter<double> p(kind, Tensor<double>({1}, w0));
  AdamW<double> opt({{"p", &p}}, wd);
  for (int i = 0; i < steps; ++i) {
    p.grad = Tensor<double>({1}, g);
    opt.step(lr);
  }
  return p.value[0];
}

std::vector<std::uint8_t> record(std::uint8_t label, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  std::vector<std::uint8_t> rec(cifar::record_bytes);
  rec[0] = label;
  std::fill(rec.begin() + 1, rec.begin() + 1 + cifar::plane, r);
  std::fill(rec.begin() + 1 + cifar::plane, rec.begin() + 1 + 2 * cifar::plane, g);
  std::fill(rec.begin() + 1 + 2 * cifar::plane, rec.end(), b);
  return rec;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("smlp_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(AdamW, DecayOnlyStep) {
  EXPECT_NEAR(adam_after(ParamKind::weight, 2.0, 0.0, 1e-3, 0.05), 2.0 * (1.0 - 5e-5), 1e-15);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // Bias-corrected m / sqrt(v) equals sign(g) on the first step.
  EXPECT_NEAR(adam_after(ParamKind::weight, 1.0, 0.3, 1e-2, 0.0), 1.0 - 1e-2, 1e-9);
  EXPECT_NEAR(adam_after(ParamKind::weight, 1.0, -7.0, 1e-2, 0.0), 1.0 + 1e-2, 1e-9);
}

TEST(AdamW, MinimizesQuadratic) {
  Parameter<double> p(ParamKind::weight, Tensor<double>({1}, 1.0));
  AdamW<double> opt({{"p", &p}}, 0.0);
  for (int i = 0; i < 100; ++i) {
    p.grad = Tensor<double>({1}, 2.0 * p.value[0]);
    opt.step(0.1);
  }
  EXPECT_LT(std::abs(p.value[0]), 0.1);
}

TEST(AdamW, DecayCompounds) {
  EXPECT_NEAR(adam_after(ParamKind::weight, 1.0, 0.0, 1e-2, 0.1, 50), std::pow(1.0 - 1e-3, 50), 1e-14);
}

TEST(AdamW, BiasAndNormParametersAreNotDecayed) {
  EXPECT_EQ(adam_after(ParamKind::bias, 2.0, 0.0, 1e-3, 0.05), 2.0);
  EXPECT_EQ(adam_after(ParamKind::norm, 2.0, 0.0, 1e-3, 0.05), 2.0);
}

TEST(AdamW, StateShapeMismatchIsAnError) {
  Parameter<double> p(ParamKind::weight, Tensor<double>({2}, 1.0));
  AdamW<double> opt({{"p", &p}});
  p.value = Tensor<double>({3}, 1.0);
  EXPECT_THROW(opt.step(1e-3), ShapeError);
}

TEST(Schedule, EndpointsAreExact) {
  TrainConfig cfg;
  cfg.warmup_epochs = 5;
  cfg.total_epochs = 300;
  const std::size_t spe = 10;
  EXPECT_EQ(lr_at(cfg, 0, spe), 0.0);
  EXPECT_EQ(lr_at(cfg, 50, spe), 1e-3);
  EXPECT_EQ(lr_at(cfg, 2999, spe), 1e-5);
  EXPECT_EQ(lr_at(cfg, 5000, spe), 1e-5);
}

TEST(Schedule, MidpointOfCosine) {
  TrainConfig cfg;
  cfg.warmup_epochs = 1;
  cfg.total_epochs = 22;
  // One step per epoch: warmup ends at step 1, cosine span T = 20, step 11 is t = 1/2.
  EXPECT_NEAR(lr_at(cfg, 11, 1), 5.05e-4, 1e-15);
}

TEST(Schedule, ContinuousAndMonotoneAfterWarmup) {
  TrainConfig cfg;
  cfg.warmup_epochs = 2;
  cfg.total_epochs = 30;
  const std::size_t spe = 8, warmup = 16, total = 240;
  for (std::size_t s = 1; s < warmup; ++s) EXPECT_GT(lr_at(cfg, s, spe), lr_at(cfg, s - 1, spe));
  for (std::size_t s = warmup + 1; s < total; ++s) {
    EXPECT_LE(lr_at(cfg, s, spe), lr_at(cfg, s - 1, spe));
    EXPECT_LT(lr_at(cfg, s - 1, spe) - lr_at(cfg, s, spe), 2e-5);
  }
}

TEST(LabelSmoothing, ZeroSmoothingIsCrossEntropy) {
  Tape<double> tape(false);
  const Tensor<double> logits({1, 3}, {1.0, 2.0, 0.5});
  const std::vector<int> label{1};
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(0.5));
  EXPECT_NEAR(label_smoothing_ce<double>(tape.constant(logits), label, 0.0).value().item(), lse - 2.0, 1e-14);
}

TEST(LabelSmoothing, UniformLogitsGiveLogK) {
  Tape<double> tape(false);
  const std::vector<int> labels{0, 4};
  EXPECT_NEAR(label_smoothing_ce<double>(tape.constant(Tensor<double>({2, 5}, 0.3)), labels, 0.1).value().item(),
              std::log(5.0), 1e-14);
  const std::vector<int> one{1};
  EXPECT_NEAR(label_smoothing_ce<double>(tape.constant(Tensor<double>({1, 2})), one, 0.2).value().item(), std::log(2.0),
              1e-15);
}

TEST(LabelSmoothing, OutOfRangeLabelIsAnError) {
  Tape<double> tape(false);
  const std::vector<int> bad{3};
  EXPECT_THROW(label_smoothing_ce<double>(tape.constant(Tensor<double>({1, 3})), bad, 0.1), std::out_of_range);
}

TEST(Cifar, FullTestFileShape) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(10000 * cifar::record_bytes);
  for (int i = 0; i < 10000; ++i) {
    const auto rec = record(static_cast<std::uint8_t>(i % 10), 1, 2, 3);
    bytes.insert(bytes.end(), rec.begin(), rec.end());
  }
  const auto d = parse_cifar10(bytes);
  EXPECT_EQ(d.size(), 10000u);
  EXPECT_EQ(d.height, 32u);
  EXPECT_EQ(d.width, 32u);
  EXPECT_EQ(d.pixels.size(), 10000u * 32 * 32 * 3);
}

TEST(Cifar, TruncatedFileIsAnError) {
  auto rec = record(0, 0, 0, 0);
  rec.pop_back();
  EXPECT_THROW(parse_cifar10(rec), FormatError);
}

TEST(Cifar, LabelAndPlanesDecode) {
  const auto d = parse_cifar10(record(6, 10, 20, 30));
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.labels[0], 6);
  EXPECT_EQ(d.image(0)[0], 10);
  EXPECT_EQ(d.image(0)[1], 20);
  EXPECT_EQ(d.image(0)[2], 30);
  EXPECT_THROW(parse_cifar10(record(10, 0, 0, 0)), FormatError);
}

TEST(Cifar, EncodeParseRoundTrip) {
  const auto d = synthetic_cifar(20, 3);
  const auto back = parse_cifar10(encode_cifar10(d));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.pixels, d.pixels);
}

TEST(Cifar, DirectoryLoading) {
  const auto dir = temp_dir("cifar_dir");
  write_synthetic_cifar(dir, 30, 10, 1);
  EXPECT_EQ(load_cifar10(dir, Split::train).size(), 30u);
  EXPECT_EQ(load_cifar10(dir, Split::test).size(), 10u);
  EXPECT_THROW(load_cifar10(dir / "missing", Split::train), std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST(Batch, NormalizesPerChannel) {
  Dataset d = parse_cifar10(record(2, 255, 0, 128));
  d.pixels[0] = 0;
  const std::vector<std::size_t> idx{0};
  const Normalization norm;
  const auto b = make_batch<double>(d, idx, norm);
  EXPECT_EQ(b.images.shape(), (Shape{1, 32, 32, 3}));
  EXPECT_EQ(b.labels, std::vector<int>{2});
  EXPECT_NEAR(b.images[3], (1.0 - 0.4914) / 0.2470, 1e-12);
  EXPECT_NEAR(b.images[0], (0.0 - 0.4914) / 0.2470, 1e-12);
}

TEST(Config, ParsesAndRejectsUnknownKeys) {
  std::istringstream good("[model]\nvariant=smlpnet_t\nimage_size=32\nnum_classes=10\n[train]\ntotal_epochs=3\nwarmup_epochs=1\n");
  const auto cfg = parse_config(good);
  EXPECT_EQ(cfg.model.embed_dim, 80u);
  EXPECT_EQ(cfg.model.num_classes, 10u);
  EXPECT_EQ(cfg.train.total_epochs, 3u);
  std::istringstream bad("[model]\nembed=4\n");
  EXPECT_THROW(parse_config(bad), ConfigError);
  std::istringstream round(config_text(cfg));
  EXPECT_EQ(config_text(parse_config(round)), config_text(cfg));
}

TEST(Checkpoint, RoundTripGivesBitIdenticalLogits) {
  SmlpNet<float> net(small_model(), 3);
  const auto data = synthetic_cifar(4, 9);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto images = make_batch<float>(data, idx, {}).images;
  for (auto& b : net.buffers())
    for (auto& v : b.tensor->data()) v += 0.25f;
  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", net);
  auto loaded = load_model<float>(dir / "a.ckpt");
  EXPECT_EQ(loaded.predict(images), net.predict(images));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RestoresOptimizerAndRng) {
  SmlpNet<float> net(small_model(), 1);
  AdamW<float> opt(net.parameters());
  opt.set_steps(7);
  opt.moments()[0].m[0] = 0.5f;
  Rng rng(99);
  rng();
  const auto c = decode_checkpoint(encode_checkpoint(capture_checkpoint(net, &opt, 4, &rng)));
  SmlpNet<float> other(small_model(), 2);
  AdamW<float> opt2(other.parameters());
  Rng rng2(0);
  restore_checkpoint(c, other, &opt2, &rng2);
  EXPECT_EQ(c.epoch, 4u);
  EXPECT_EQ(opt2.steps(), 7u);
  EXPECT_EQ(opt2.moments()[0].m[0], 0.5f);
  EXPECT_EQ(rng2(), rng());
}

TEST(Checkpoint, CorruptionIsDetected) {
  SmlpNet<float> net(small_model(), 0);
  const std::string bytes = encode_checkpoint(capture_checkpoint(net));
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 10)), CheckpointError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), CheckpointError);

  std::string tampered = bytes;
  const auto pos = tampered.find("tensor param embed.proj.weight");
  ASSERT_NE(pos, std::string::npos);
  const auto eol = tampered.find('\n', pos);
  const auto space = tampered.rfind(' ', eol);
  tampered.replace(space + 1, eol - space - 1, "12");
  EXPECT_THROW(decode_checkpoint(tampered), CheckpointError);

  std::string digest = bytes;
  const auto d = digest.find("digest ") + 7;
  digest[d] = digest[d] == '0' ? '1' : '0';
  EXPECT_THROW(decode_checkpoint(digest), CheckpointError);

  auto c = capture_checkpoint(net);
  SmlpNet<float> other(small_model(5), 0);
  EXPECT_THROW(restore_checkpoint(c, other), CheckpointError);
}

TEST(Checkpoint, RecordsCoverEveryParameter) {
  auto net = build_variant<float>("smlpnet_t", VariantOverrides{.resolution = 32});
  const auto c = capture_checkpoint(net);
  std::size_t values = 0, expected = 0;
  for (const auto& r : c.records)
    if (r.section == "param") values += r.values.size();
  for (const auto& p : net.parameters()) expected += p.param->value.size();
  EXPECT_EQ(values, expected);
  EXPECT_EQ(c.count("param"), net.parameters().size());
}

TEST(Training, SameSeedGivesIdenticalLogs) {
  const auto data = synthetic_cifar(48, 5);
  TrainConfig cfg;
  cfg.total_epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 16;
  auto run = [&] {
    SmlpNet<float> net(small_model(), 0);
    return train(net, data, cfg);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.steps.size(), 6u);
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].loss, b.steps[i].loss);
    EXPECT_EQ(a.steps[i].lr, lr_at(cfg, i, 3));
  }
  EXPECT_EQ(a.epochs.size(), 2u);
}

TEST(Training, HooksCanStopEarly) {
  const auto data = synthetic_cifar(16, 5);
  TrainConfig cfg;
  cfg.total_epochs = 5;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 8;
  SmlpNet<float> net(small_model(), 0);
  Trainer<float> trainer(net, cfg);
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& e) { return e.epoch < 2; };
  EXPECT_EQ(trainer.fit(data, nullptr, hooks).epochs.size(), 2u);
  EXPECT_EQ(trainer.epoch(), 2u);
  EXPECT_EQ(trainer.global_step(), 4u);
}

TEST(Training, WrongResolutionIsAnError) {
  Dataset d;
  d.height = d.width = 16;
  d.pixels.assign(16 * 16 * 3, 0);
  d.labels = {0};
  SmlpNet<float> net(small_model(), 0);
  TrainConfig cfg;
  EXPECT_THROW(train(net, d, cfg), ShapeError);
}

TEST(Evaluate, EmptyDatasetIsAnError) {
  SmlpNet<float> net(small_model(), 0);
  EXPECT_THROW(evaluate(net, Dataset{}, {}), std::invalid_argument);
}

TEST(Evaluate, UntrainedAccuracyNearChance) {
  SmlpNet<float> net(small_model(), 4);
  const auto data = synthetic_cifar(1000, 6);
  const auto r = evaluate(net, data, {});
  // Binomial(1000, 0.1): three standard deviations is about 0.028.
  EXPECT_NEAR(r.accuracy, 0.1, 0.03);
  EXPECT_EQ(r.count, 1000u);
  EXPECT_GT(r.mean_loss, 0.0);
}

TEST(Evaluate, LeavesModelUntouched) {
  SmlpNet<float> net(small_model(), 2);
  const auto data = synthetic_cifar(20, 1);
  const auto before = capture_checkpoint(net);
  const auto first = evaluate(net, data, {}, 7);
  const auto second = evaluate(net, data, {}, 7);
  EXPECT_EQ(first.accuracy, second.accuracy);
  EXPECT_EQ(first.mean_loss, second.mean_loss);
  EXPECT_EQ(encode_checkpoint(capture_checkpoint(net)), encode_checkpoint(before));
}
