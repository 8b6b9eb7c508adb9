#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smlp/analyzer.hpp"
#include "smlp/checkpoint.hpp"
#include "smlp/config_io.hpp"
#include "smlp/data.hpp"
#include "smlp/trainer.hpp"
#include "smlp/variants.hpp"
#include "smlp/verification.hpp"

namespace smlp::cli {

enum ExitCode : int { exit_ok = 0, exit_verification_failed = 1, exit_usage = 2 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelOverrides {
  std::optional<std::size_t> alpha;
  std::optional<std::size_t> embed_dim;
  std::optional<std::vector<std::size_t>> depths;
  std::optional<double> droppath;
  std::optional<std::size_t> classes;

  void add_to(CLI::App& app) {
    app.add_option("--alpha", alpha, "Channel-MLP expansion ratio");
    app.add_option("--embed-dim,-C", embed_dim, "Stage-1 channel count");
    app.add_option("--depths", depths, "Blocks per stage")->delimiter(',');
    app.add_option("--droppath", droppath, "Maximum drop-path rate");
    app.add_option("--classes", classes, "Number of output classes");
  }

  void apply(ModelConfig& m) const {
    if (alpha) m.alpha = *alpha;
    if (embed_dim) m.embed_dim = *embed_dim;
    if (depths) m.depths = *depths;
    if (droppath) m.droppath = *droppath;
    if (classes) m.num_classes = *classes;
    m.validate();
  }
};

// Data root: explicit flag, then the config file, then $SMLP_DATA_DIR.
inline std::filesystem::path resolve_data_path(const std::string& flag, const std::string& from_config) {
  std::string p = flag;
  if (p.empty()) p = from_config;
  if (p.empty()) {
    if (const char* env = std::getenv("SMLP_DATA_DIR")) p = env;
  }
  if (p.empty()) throw UsageError("no data path given (use --data, [data] path, or SMLP_DATA_DIR)");
  if (!std::filesystem::exists(p)) throw UsageError("data path '" + p + "' does not exist");
  return p;
}

inline void print_layers(std::ostream& out, const CostReport& r) {
  std::size_t width = 4;
  for (const auto& l : r.layers) width = std::max(width, l.path.size());
  out << std::left << std::setw(static_cast<int>(width)) << "path" << "  " << std::setw(10) << "kind" << std::right
      << std::setw(12) << "params" << std::setw(16) << "MACs" << '\n';
  for (const auto& l : r.layers) {
    out << std::left << std::setw(static_cast<int>(width)) << l.path << "  " << std::setw(10) << l.kind << std::right
        << std::setw(12) << l.params << std::setw(16) << l.macs << '\n';
  }
}

struct AnalyzeArgs {
  std::string model;
  std::string config;
  std::optional<std::size_t> resolution;
  std::string format = "text";
  std::string table;
  bool all_main = false;
  bool stage_sweep = false;
  bool layers = false;
  ModelOverrides overrides;
};

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const TableFormat fmt = a.format == "csv" ? TableFormat::csv : TableFormat::text;
  std::string table = a.table;
  if (a.all_main) table = "main";
  if (a.stage_sweep) table = "stage-mask";
  if (!table.empty()) {
    if (!a.model.empty() || !a.config.empty()) throw UsageError("--model/--config cannot be combined with a table");
    std::vector<TableRow> rows;
    if (table == "main") rows = main_model_rows();
    else if (table == "stage-mask") rows = stage_mask_rows();
    else if (table == "local-global") rows = local_global_rows();
    else if (table == "fusion") rows = fusion_rows();
    else if (table == "multistage") rows = multistage_rows();
    out << emit_table(rows, fmt);
    return exit_ok;
  }
  ModelConfig cfg;
  if (!a.config.empty()) {
    if (!a.model.empty()) throw UsageError("give either --model or --config, not both");
    cfg = load_config(a.config).model;
  } else {
    cfg = variant_config(a.model.empty() ? "smlpnet_t" : a.model);
  }
  if (a.resolution) cfg.image_height = cfg.image_width = *a.resolution;
  a.overrides.apply(cfg);
  const CostReport r = analyze_config(cfg);
  out << emit_table({table_row(cfg.name, r)}, fmt);
  if (a.layers) {
    out << '\n';
    print_layers(out, r);
  }
  return exit_ok;
}

struct ProbeArgs {
  std::vector<std::size_t> grid{4, 4};
  std::vector<std::size_t> source{0, 0};
  std::size_t passes = 1;
  std::size_t channels = 3;
  std::uint64_t seed = 0;
};

inline int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  const std::size_t h = a.grid.at(0), w = a.grid.at(1);
  if (h == 0 || w == 0) throw UsageError("grid extents must be positive");
  if (a.source.at(0) >= h || a.source.at(1) >= w) {
    throw UsageError("source (" + std::to_string(a.source[0]) + ", " + std::to_string(a.source[1]) + ") lies outside the " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  const auto r = receptive_probe(h, w, {a.source[0], a.source[1]}, a.passes, a.seed, a.channels);
  out << "grid " << h << "x" << w << ", source (" << a.source[0] << ", " << a.source[1] << "), passes " << a.passes
      << '\n';
  out << "influenced tokens: " << r.influenced.size() << '\n';
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const bool src = i == a.source[0] && j == a.source[1];
      out << (src ? 'S' : r.contains(i, j) ? '#' : '.');
    }
    out << '\n';
  }
  for (const auto& [i, j] : r.influenced) out << "(" << i << ", " << j << ")\n";
  return exit_ok;
}

struct GradcheckArgs {
  std::string scope = "block";
  std::size_t resolution = 16;
  bool perturb = false;
  std::uint64_t seed = 0;
};

inline int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  struct Reset {
    ~Reset() { debug::perturb_backward = false; }
  } reset;
  debug::perturb_backward = a.perturb;
  std::vector<verify::GradcheckCase> cases;
  if (a.scope == "layer") cases = verify::layer_gradchecks(a.seed);
  else if (a.scope == "block") cases = verify::block_gradchecks(a.seed);
  else cases.push_back(verify::model_gradcheck(a.resolution, a.seed));
  bool ok = true;
  out << std::scientific << std::setprecision(3);
  for (const auto& c : cases) {
    ok = ok && c.passed();
    out << (c.passed() ? "PASS " : "FAIL ") << c.name << "  max_rel_error=" << c.result.max_rel_error
        << "  tol=" << c.tolerance << "  checked=" << c.result.checked;
    if (!c.passed()) out << "  worst=" << c.result.worst;
    out << '\n';
  }
  out << (ok ? "gradcheck passed" : "gradcheck FAILED") << '\n';
  return ok ? exit_ok : exit_verification_failed;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out = "run";
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> warmup;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> subset;
  std::optional<std::size_t> eval_subset;
  std::optional<double> lr;
  bool no_augment = false;
  bool quiet = false;
  ModelOverrides overrides;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig rc = load_config(a.config);
  if (a.epochs) rc.train.total_epochs = *a.epochs;
  if (a.warmup) rc.train.warmup_epochs = *a.warmup;
  if (a.batch_size) rc.train.batch_size = *a.batch_size;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.subset) rc.train.subset = *a.subset;
  if (a.eval_subset) rc.data.eval_subset = *a.eval_subset;
  if (a.lr) rc.train.lr_max = *a.lr;
  if (a.no_augment) rc.train.augment = false;
  a.overrides.apply(rc.model);
  if (a.overrides.droppath) rc.train.droppath = *a.overrides.droppath;
  rc.train.validate();

  const auto root = resolve_data_path(a.data, rc.data.path);
  rc.data.path = root.string();
  const Dataset train_set = load_cifar10(root, Split::train).head(rc.train.subset);
  std::optional<Dataset> eval_set;
  if (std::filesystem::is_directory(root)) {
    try {
      eval_set = load_cifar10(root, Split::test).head(rc.data.eval_subset);
    } catch (const std::runtime_error&) {
      eval_set.reset();
    }
  }

  const std::filesystem::path dir(a.out);
  std::filesystem::create_directories(dir);
  {
    std::ofstream cfg_out(dir / "config.cfg");
    cfg_out << config_text(rc);
  }

  SmlpNet<float> net(rc.model, rc.train.seed);
  Trainer<float> trainer(net, rc.train, rc.data.normalization, rc.data.augmentation);
  out << "training " << rc.model.name << " on " << train_set.size() << " samples"
      << (eval_set ? ", evaluating on " + std::to_string(eval_set->size()) : std::string()) << '\n';

  std::vector<EpochRecord> epochs;
  double best = -1.0;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& e) {
    epochs.push_back(e);
    const double score = eval_set ? e.eval_acc : -e.train_loss;
    save_checkpoint(dir / "last.ckpt", net, &trainer.optimizer(), e.epoch, &trainer.rng());
    if (score > best) {
      best = score;
      save_checkpoint(dir / "best.ckpt", net, &trainer.optimizer(), e.epoch, &trainer.rng());
    }
    std::ofstream csv(dir / "metrics.csv");
    write_epoch_csv(csv, epochs);
    if (!a.quiet) {
      out << "epoch " << e.epoch << "/" << rc.train.total_epochs << "  lr=" << std::scientific << std::setprecision(3)
          << e.lr << std::defaultfloat << std::setprecision(6) << "  loss=" << e.train_loss << "  train_acc=" << e.train_acc;
      if (eval_set) out << "  eval_acc=" << e.eval_acc;
      out << std::endl;
    }
    return true;
  };
  const TrainLog log = trainer.fit(train_set, eval_set ? &*eval_set : nullptr, hooks);
  {
    std::ofstream steps(dir / "steps.csv");
    write_step_csv(steps, log.steps);
  }
  out << "wrote " << (dir / "best.ckpt").string() << ", " << (dir / "last.ckpt").string() << ", "
      << (dir / "metrics.csv").string() << '\n';
  return exit_ok;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string config;
  std::string split = "test";
  std::size_t subset = 0;
  std::size_t batch_size = 128;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  if (!std::filesystem::exists(a.checkpoint)) throw UsageError("checkpoint '" + a.checkpoint + "' does not exist");
  DataConfig dc;
  std::filesystem::path cfg_path = a.config;
  if (cfg_path.empty()) {
    const auto sibling = std::filesystem::path(a.checkpoint).parent_path() / "config.cfg";
    if (std::filesystem::exists(sibling)) cfg_path = sibling;
  }
  if (!cfg_path.empty()) dc = load_config(cfg_path).data;
  const auto root = resolve_data_path(a.data, a.config.empty() ? std::string() : dc.path);
  SmlpNet<float> net = load_model<float>(a.checkpoint);
  const Dataset data = load_cifar10(root, a.split == "train" ? Split::train : Split::test).head(a.subset);
  const EvalResult r = evaluate(net, data, dc.normalization, a.batch_size);
  out << std::fixed << std::setprecision(4) << "top-1: " << r.accuracy << "  mean_loss: " << r.mean_loss
      << "  samples: " << r.count << '\n';
  return exit_ok;
}

struct SynthArgs {
  std::string out;
  std::size_t train = 5000;
  std::size_t test = 1000;
  std::uint64_t seed = 0;
};

inline int cmd_synth(const SynthArgs& a, std::ostream& out) {
  write_synthetic_cifar(a.out, a.train, a.test, a.seed);
  out << "wrote " << a.train << " training and " << a.test << " test records to " << a.out << '\n';
  return exit_ok;
}

// Entry point; `args` excludes the program name.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"sMLPNet model construction, cost analysis, verification and training"};
  app.name("smlpnet");
  app.require_subcommand(1);

  AnalyzeArgs analyze_args;
  auto* analyze = app.add_subcommand("analyze", "Parameter and MAC counts of a model or a table of models");
  auto* model_opt = analyze->add_option("--model,-m", analyze_args.model, "Named model or ablation variant");
  analyze->add_option("--config", analyze_args.config, "Model config file")->excludes(model_opt);
  analyze->add_option("--res", analyze_args.resolution, "Input resolution (square)");
  analyze->add_option("--format", analyze_args.format, "Output format")->check(CLI::IsMember({"text", "csv"}));
  analyze->add_option("--table", analyze_args.table, "Emit a comparison table")
      ->check(CLI::IsMember({"main", "stage-mask", "local-global", "fusion", "multistage"}));
  analyze->add_flag("--all-main", analyze_args.all_main, "The four main models (same as --table main)");
  analyze->add_flag("--stage-sweep", analyze_args.stage_sweep, "Per-stage sMLP removal sweep (same as --table stage-mask)");
  analyze->add_flag("--table3-sweep", analyze_args.stage_sweep)->group("");
  analyze->add_flag("--layers", analyze_args.layers, "Also print the per-layer breakdown");
  analyze_args.overrides.add_to(*analyze);

  ProbeArgs probe_args;
  auto* probe = app.add_subcommand("probe", "Influence set of one token through a random sMLP block");
  probe->add_option("--grid", probe_args.grid, "Grid height and width")->expected(2);
  probe->add_option("--source", probe_args.source, "Perturbed token (row, column)")->expected(2);
  probe->add_option("--passes", probe_args.passes, "Number of block applications")->check(CLI::PositiveNumber);
  probe->add_option("--channels", probe_args.channels, "Channels per token")->check(CLI::PositiveNumber);
  probe->add_option("--seed", probe_args.seed, "Weight seed");

  GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of analytic gradients");
  gc->add_option("--scope", gc_args.scope, "layer, block or model")->check(CLI::IsMember({"layer", "block", "model"}));
  gc->add_option("--res", gc_args.resolution, "Input resolution of the model scope")->check(CLI::PositiveNumber);
  gc->add_flag("--perturb-backward", gc_args.perturb, "Test hook: corrupt the linear-layer input gradient");
  gc->add_option("--seed", gc_args.seed, "Seed");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train on CIFAR-10 binary batches");
  train_cmd->add_option("--config", train_args.config, "Run config file")->required();
  train_cmd->add_option("--data", train_args.data, "CIFAR-10 directory or batch file");
  train_cmd->add_option("--out", train_args.out, "Output directory");
  train_cmd->add_option("--epochs", train_args.epochs, "Total epochs");
  train_cmd->add_option("--warmup", train_args.warmup, "Warmup epochs");
  train_cmd->add_option("--batch-size", train_args.batch_size, "Batch size");
  train_cmd->add_option("--seed", train_args.seed, "Seed");
  train_cmd->add_option("--subset", train_args.subset, "Use only the first N training samples");
  train_cmd->add_option("--eval-subset", train_args.eval_subset, "Evaluate on the first N test samples");
  train_cmd->add_option("--lr", train_args.lr, "Peak learning rate");
  train_cmd->add_flag("--no-augment", train_args.no_augment, "Disable flip and crop");
  train_cmd->add_flag("--quiet,-q", train_args.quiet, "Only print the final summary");
  train_args.overrides.add_to(*train_cmd);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_args.data, "CIFAR-10 directory or batch file");
  eval_cmd->add_option("--config", eval_args.config, "Config providing the normalization constants");
  eval_cmd->add_option("--split", eval_args.split, "Split to evaluate")->check(CLI::IsMember({"train", "test"}));
  eval_cmd->add_option("--subset", eval_args.subset, "Use only the first N samples");
  eval_cmd->add_option("--batch-size", eval_args.batch_size, "Batch size")->check(CLI::PositiveNumber);

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset in the CIFAR-10 binary layout");
  synth->add_option("--out", synth_args.out, "Output directory")->required();
  synth->add_option("--train", synth_args.train, "Training records");
  synth->add_option("--test", synth_args.test, "Test records");
  synth->add_option("--seed", synth_args.seed, "Seed");

  auto* variants = app.add_subcommand("variants", "List the named models and ablation variants");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? exit_ok : exit_usage;
  }

  try {
    if (*analyze) return cmd_analyze(analyze_args, out);
    if (*probe) return cmd_probe(probe_args, out);
    if (*gc) return cmd_gradcheck(gc_args, out);
    if (*train_cmd) return cmd_train(train_args, out);
    if (*eval_cmd) return cmd_eval(eval_args, out);
    if (*synth) return cmd_synth(synth_args, out);
    if (*variants) {
      for (const auto& n : variant_names()) out << n << '\n';
      return exit_ok;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_usage;
  }
  return exit_usage;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args), out, err);
}

}  // namespace smlp::cli
