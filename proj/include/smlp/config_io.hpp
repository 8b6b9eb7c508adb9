#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "smlp/config.hpp"
#include "smlp/data.hpp"
#include "smlp/optim.hpp"
#include "smlp/variants.hpp"

namespace smlp {

struct DataConfig {
  std::string path;
  Normalization normalization;
  Augmentation augmentation;
  std::size_t eval_subset = 0;  // 0 evaluates the whole test split
};

// Everything a config file can describe.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  if (pos != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(parse_size(key, item));
  return out;
}

inline std::array<double, 3> parse_triple(const std::string& key, const std::string& v) {
  const auto items = split_list(v);
  if (items.size() != 3) throw ConfigError(key + ": expected three comma-separated values");
  return {parse_double(key, items[0]), parse_double(key, items[1]), parse_double(key, items[2])};
}

inline std::string format_double(double x) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << x;
  return os.str();
}

template <typename Seq, typename Fn>
std::string join(const Seq& seq, Fn&& fn) {
  std::string out;
  for (const auto& x : seq) out += (out.empty() ? "" : ",") + fn(x);
  return out;
}

inline const std::vector<std::string>& known_keys(const std::string& section) {
  static const std::vector<std::string> model{"variant", "name",   "image_size", "image_height", "image_width",
                                              "patch",   "embed_dim", "depths",  "alpha",        "token_mlp_alpha",
                                              "num_classes", "droppath", "single_stage", "mixers", "dwconv",
                                              "topology", "identity", "fusion", "init_std"};
  static const std::vector<std::string> train{"lr_max",     "lr_min",          "weight_decay", "warmup_epochs",
                                              "total_epochs", "batch_size",    "label_smoothing", "droppath",
                                              "seed",       "augment",         "subset"};
  static const std::vector<std::string> data{"path", "mean", "std", "flip", "pad", "eval_subset"};
  static const std::vector<std::string> none;
  if (section == "model") return model;
  if (section == "train") return train;
  if (section == "data") return data;
  return none;
}

}  // namespace detail

// Applies [model], [train] and [data] entries onto `cfg`. Unknown sections or
// keys are rejected so that typos do not pass silently.
inline void apply_config(const boost::property_tree::ptree& tree, RunConfig& cfg) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_size;
  for (const auto& [section, body] : tree) {
    const auto& keys = detail::known_keys(section);
    if (keys.empty()) throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) {
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
      }
    }
  }

  auto get = [&](const std::string& section, const std::string& key) -> std::optional<std::string> {
    auto v = tree.get_optional<std::string>(boost::property_tree::ptree::path_type(section + "/" + key, '/'));
    if (!v) return std::nullopt;
    return detail::trim(*v);
  };

  auto& m = cfg.model;
  if (auto v = get("model", "variant")) m = variant_config(*v);
  if (auto v = get("model", "name")) m.name = *v;
  if (auto v = get("model", "image_size")) m.image_height = m.image_width = parse_size("model.image_size", *v);
  if (auto v = get("model", "image_height")) m.image_height = parse_size("model.image_height", *v);
  if (auto v = get("model", "image_width")) m.image_width = parse_size("model.image_width", *v);
  if (auto v = get("model", "patch")) m.patch = parse_size("model.patch", *v);
  if (auto v = get("model", "embed_dim")) m.embed_dim = parse_size("model.embed_dim", *v);
  if (auto v = get("model", "depths")) m.depths = detail::parse_sizes("model.depths", *v);
  if (auto v = get("model", "alpha")) m.alpha = parse_size("model.alpha", *v);
  if (auto v = get("model", "token_mlp_alpha")) m.token_mlp_alpha = parse_size("model.token_mlp_alpha", *v);
  if (auto v = get("model", "num_classes")) m.num_classes = parse_size("model.num_classes", *v);
  if (auto v = get("model", "droppath")) m.droppath = parse_double("model.droppath", *v);
  if (auto v = get("model", "single_stage")) m.single_stage = parse_bool("model.single_stage", *v);
  if (auto v = get("model", "mixers")) {
    m.mixers.clear();
    for (const auto& s : detail::split_list(*v)) m.mixers.push_back(parse_global_mixer(s));
  }
  if (auto v = get("model", "dwconv")) {
    m.dwconv.clear();
    for (const auto& s : detail::split_list(*v)) m.dwconv.push_back(parse_bool("model.dwconv", s));
  }
  if (auto v = get("model", "topology")) m.smlp.topology = parse_topology(*v);
  if (auto v = get("model", "identity")) m.smlp.identity = parse_bool("model.identity", *v);
  if (auto v = get("model", "fusion")) m.smlp.fusion = parse_fusion(*v);
  if (auto v = get("model", "init_std")) m.init_std = parse_double("model.init_std", *v);

  auto& t = cfg.train;
  if (auto v = get("train", "lr_max")) t.lr_max = parse_double("train.lr_max", *v);
  if (auto v = get("train", "lr_min")) t.lr_min = parse_double("train.lr_min", *v);
  if (auto v = get("train", "weight_decay")) t.weight_decay = parse_double("train.weight_decay", *v);
  if (auto v = get("train", "warmup_epochs")) t.warmup_epochs = parse_size("train.warmup_epochs", *v);
  if (auto v = get("train", "total_epochs")) t.total_epochs = parse_size("train.total_epochs", *v);
  if (auto v = get("train", "batch_size")) t.batch_size = parse_size("train.batch_size", *v);
  if (auto v = get("train", "label_smoothing")) t.label_smoothing = parse_double("train.label_smoothing", *v);
  if (auto v = get("train", "droppath")) {
    t.droppath = parse_double("train.droppath", *v);
    m.droppath = t.droppath;
  }
  if (auto v = get("train", "seed")) t.seed = parse_size("train.seed", *v);
  if (auto v = get("train", "augment")) t.augment = parse_bool("train.augment", *v);
  if (auto v = get("train", "subset")) t.subset = parse_size("train.subset", *v);

  auto& d = cfg.data;
  if (auto v = get("data", "path")) d.path = *v;
  if (auto v = get("data", "mean")) d.normalization.mean = detail::parse_triple("data.mean", *v);
  if (auto v = get("data", "std")) d.normalization.std = detail::parse_triple("data.std", *v);
  if (auto v = get("data", "flip")) d.augmentation.flip = parse_bool("data.flip", *v);
  if (auto v = get("data", "pad")) d.augmentation.pad = parse_size("data.pad", *v);
  if (auto v = get("data", "eval_subset")) d.eval_subset = parse_size("data.eval_subset", *v);
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "<stream>") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig cfg;
  apply_config(tree, cfg);
  cfg.model.validate();
  cfg.train.validate();
  for (double s : cfg.data.normalization.std) {
    if (!(s > 0.0)) throw ConfigError(source + ": data.std entries must be positive");
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

// Canonical [model] section: fixed key order, round-trip exact numbers.
inline std::string model_config_text(const ModelConfig& m) {
  std::ostringstream os;
  os << "[model]\n"
     << "name=" << m.name << "\n"
     << "image_height=" << m.image_height << "\n"
     << "image_width=" << m.image_width << "\n"
     << "patch=" << m.patch << "\n"
     << "embed_dim=" << m.embed_dim << "\n"
     << "depths=" << detail::join(m.depths, [](std::size_t d) { return std::to_string(d); }) << "\n"
     << "alpha=" << m.alpha << "\n"
     << "token_mlp_alpha=" << m.token_mlp_alpha << "\n"
     << "num_classes=" << m.num_classes << "\n"
     << "droppath=" << detail::format_double(m.droppath) << "\n"
     << "single_stage=" << (m.single_stage ? "true" : "false") << "\n"
     << "mixers=" << detail::join(m.mixers, [](GlobalMixer g) { return to_string(g); }) << "\n"
     << "dwconv=" << detail::join(m.dwconv, [](bool b) { return std::string(b ? "true" : "false"); }) << "\n"
     << "topology=" << to_string(m.smlp.topology) << "\n"
     << "identity=" << (m.smlp.identity ? "true" : "false") << "\n"
     << "fusion=" << to_string(m.smlp.fusion) << "\n"
     << "init_std=" << detail::format_double(m.init_std) << "\n";
  return os.str();
}

inline std::string train_config_text(const TrainConfig& t) {
  std::ostringstream os;
  os << "[train]\n"
     << "lr_max=" << detail::format_double(t.lr_max) << "\n"
     << "lr_min=" << detail::format_double(t.lr_min) << "\n"
     << "weight_decay=" << detail::format_double(t.weight_decay) << "\n"
     << "warmup_epochs=" << t.warmup_epochs << "\n"
     << "total_epochs=" << t.total_epochs << "\n"
     << "batch_size=" << t.batch_size << "\n"
     << "label_smoothing=" << detail::format_double(t.label_smoothing) << "\n"
     << "droppath=" << detail::format_double(t.droppath) << "\n"
     << "seed=" << t.seed << "\n"
     << "augment=" << (t.augment ? "true" : "false") << "\n"
     << "subset=" << t.subset << "\n";
  return os.str();
}

inline std::string data_config_text(const DataConfig& d) {
  auto triple = [](const std::array<double, 3>& a) {
    return detail::format_double(a[0]) + "," + detail::format_double(a[1]) + "," + detail::format_double(a[2]);
  };
  std::ostringstream os;
  os << "[data]\n";
  if (!d.path.empty()) os << "path=" << d.path << "\n";
  os << "mean=" << triple(d.normalization.mean) << "\n"
     << "std=" << triple(d.normalization.std) << "\n"
     << "flip=" << (d.augmentation.flip ? "true" : "false") << "\n"
     << "pad=" << d.augmentation.pad << "\n"
     << "eval_subset=" << d.eval_subset << "\n";
  return os.str();
}

inline std::string config_text(const RunConfig& cfg) {
  return model_config_text(cfg.model) + "\n" + train_config_text(cfg.train) + "\n" + data_config_text(cfg.data);
}

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

inline std::string config_digest(const ModelConfig& m) { return hex64(fnv1a64(model_config_text(m))); }

}  // namespace smlp
