#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "smlp/config_io.hpp"
#include "smlp/model.hpp"
#include "smlp/optim.hpp"

namespace smlp {

// Container layout (all header lines are '\n'-terminated ASCII):
//
//   SMLPCKPT 1
//   digest <16 hex digits: FNV-1a 64 of the config block>
//   epoch <n>
//   optimizer_steps <n>
//   rng <byte count>\n<mt19937_64 state text>\n
//   config <byte count>\n<canonical [model] section>\n
//   records <count>
//   tensor <section> <name> <rank> <d0> ... <payload bytes>\n<little-endian f32 payload>
//   ...
//   end
//
// Sections: param, buffer, adam_m, adam_v (moments are keyed by parameter name).
inline constexpr const char* checkpoint_magic = "SMLPCKPT";
inline constexpr int checkpoint_version = 1;

struct TensorRecord {
  std::string section;
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string digest;
  std::string config_text;
  std::uint64_t epoch = 0;
  std::uint64_t optimizer_steps = 0;
  std::string rng_state;
  std::vector<TensorRecord> records;

  std::size_t count(const std::string& section) const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.section == section;
    return n;
  }

  const TensorRecord* find(const std::string& section, const std::string& name) const {
    for (const auto& r : records)
      if (r.section == section && r.name == name) return &r;
    return nullptr;
  }

  ModelConfig model_config() const {
    std::istringstream in(config_text);
    return parse_config(in, "checkpoint config").model;
  }
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
TensorRecord make_record(std::string section, std::string name, const Tensor<T>& t) {
  TensorRecord r{std::move(section), std::move(name), t.shape(), {}};
  r.values.reserve(t.size());
  for (auto v : t.data()) r.values.push_back(static_cast<float>(v));
  return r;
}

template <typename T>
void restore_tensor(const TensorRecord& r, Tensor<T>& dst) {
  if (r.shape != dst.shape()) {
    throw CheckpointError("checkpoint: tensor '" + r.name + "' has shape " + to_string(r.shape) +
                          " but the model expects " + to_string(dst.shape()));
  }
  auto out = dst.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(r.values[i]);
}

inline void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

inline float get_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

// Cursor over the raw file bytes.
class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::string line() {
    const auto end = bytes_.find('\n', pos_);
    if (end == std::string::npos) throw CheckpointError("checkpoint: truncated header");
    std::string s = bytes_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return s;
  }

  std::string take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated payload");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::uint64_t keyed_number(const std::string& line, const std::string& key) {
  std::istringstream is(line);
  std::string k;
  std::uint64_t v = 0;
  if (!(is >> k >> v) || k != key || !(is >> std::ws).eof()) {
    throw CheckpointError("checkpoint: expected '" + key + " <n>', got '" + line + "'");
  }
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  std::string out;
  out += std::string(checkpoint_magic) + " " + std::to_string(checkpoint_version) + "\n";
  out += "digest " + c.digest + "\n";
  out += "epoch " + std::to_string(c.epoch) + "\n";
  out += "optimizer_steps " + std::to_string(c.optimizer_steps) + "\n";
  out += "rng " + std::to_string(c.rng_state.size()) + "\n" + c.rng_state + "\n";
  out += "config " + std::to_string(c.config_text.size()) + "\n" + c.config_text + "\n";
  out += "records " + std::to_string(c.records.size()) + "\n";
  for (const auto& r : c.records) {
    if (numel(r.shape) != r.values.size()) throw CheckpointError("checkpoint: record '" + r.name + "' size mismatch");
    out += "tensor " + r.section + " " + r.name + " " + std::to_string(r.shape.size());
    for (auto d : r.shape) out += " " + std::to_string(d);
    out += " " + std::to_string(4 * r.values.size()) + "\n";
    for (float v : r.values) detail::put_f32(out, v);
  }
  out += "end\n";
  return out;
}

inline Checkpoint decode_checkpoint(std::string bytes) {
  detail::Reader rd(std::move(bytes));
  Checkpoint c;
  {
    std::istringstream is(rd.line());
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != checkpoint_magic) throw CheckpointError("checkpoint: bad magic");
    if (version != checkpoint_version) {
      throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
    }
  }
  {
    std::istringstream is(rd.line());
    std::string key;
    if (!(is >> key >> c.digest) || key != "digest") throw CheckpointError("checkpoint: missing digest");
  }
  c.epoch = detail::keyed_number(rd.line(), "epoch");
  c.optimizer_steps = detail::keyed_number(rd.line(), "optimizer_steps");
  c.rng_state = rd.take(detail::keyed_number(rd.line(), "rng"));
  if (rd.take(1) != "\n") throw CheckpointError("checkpoint: malformed rng block");
  c.config_text = rd.take(detail::keyed_number(rd.line(), "config"));
  if (rd.take(1) != "\n") throw CheckpointError("checkpoint: malformed config block");
  if (hex64(fnv1a64(c.config_text)) != c.digest) {
    throw CheckpointError("checkpoint: config digest mismatch (stored " + c.digest + ", computed " +
                          hex64(fnv1a64(c.config_text)) + ")");
  }
  const std::uint64_t n = detail::keyed_number(rd.line(), "records");
  c.records.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string header = rd.line();
    std::istringstream is(header);
    std::string tag;
    TensorRecord r;
    std::size_t rank = 0, payload = 0;
    if (!(is >> tag >> r.section >> r.name >> rank) || tag != "tensor" || rank > 8) {
      throw CheckpointError("checkpoint: malformed record header '" + header + "'");
    }
    r.shape.resize(rank);
    for (auto& d : r.shape)
      if (!(is >> d)) throw CheckpointError("checkpoint: malformed record header '" + header + "'");
    if (!(is >> payload) || !(is >> std::ws).eof()) {
      throw CheckpointError("checkpoint: malformed record header '" + header + "'");
    }
    if (payload != 4 * numel(r.shape)) {
      throw CheckpointError("checkpoint: record '" + r.name + "' declares " + std::to_string(payload) +
                            " payload bytes but its shape " + to_string(r.shape) + " needs " +
                            std::to_string(4 * numel(r.shape)));
    }
    const std::string raw = rd.take(payload);
    const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
    r.values.resize(numel(r.shape));
    for (std::size_t k = 0; k < r.values.size(); ++k) r.values[k] = detail::get_f32(p + 4 * k);
    c.records.push_back(std::move(r));
  }
  if (rd.line() != "end" || !rd.at_end()) throw CheckpointError("checkpoint: trailing data after records");
  return c;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

template <typename T>
Checkpoint capture_checkpoint(SmlpNet<T>& net, const AdamW<T>* opt = nullptr, std::uint64_t epoch = 0,
                              const Rng* rng = nullptr) {
  Checkpoint c;
  c.config_text = model_config_text(net.config());
  c.digest = hex64(fnv1a64(c.config_text));
  c.epoch = epoch;
  if (rng) {
    std::ostringstream os;
    os << *rng;
    c.rng_state = os.str();
  }
  for (const auto& p : net.parameters()) c.records.push_back(detail::make_record("param", p.name, p.param->value));
  for (const auto& b : net.buffers()) c.records.push_back(detail::make_record("buffer", b.name, *b.tensor));
  if (opt) {
    c.optimizer_steps = opt->steps();
    const auto& params = opt->parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.records.push_back(detail::make_record("adam_m", params[i].name, opt->moments()[i].m));
      c.records.push_back(detail::make_record("adam_v", params[i].name, opt->moments()[i].v));
    }
  }
  return c;
}

// Copies weights (and optimizer/rng state when given) back; the checkpoint must
// describe exactly this architecture.
template <typename T>
void restore_checkpoint(const Checkpoint& c, SmlpNet<T>& net, AdamW<T>* opt = nullptr, Rng* rng = nullptr) {
  const std::string expected = config_digest(net.config());
  if (c.digest != expected) {
    throw CheckpointError("checkpoint: config digest " + c.digest + " does not match the model (" + expected + ")");
  }
  auto params = net.parameters();
  auto buffers = net.buffers();
  if (c.count("param") != params.size() || c.count("buffer") != buffers.size()) {
    throw CheckpointError("checkpoint: record count does not match the model");
  }
  for (auto& p : params) {
    const auto* r = c.find("param", p.name);
    if (!r) throw CheckpointError("checkpoint: missing parameter '" + p.name + "'");
    detail::restore_tensor(*r, p.param->value);
  }
  for (auto& b : buffers) {
    const auto* r = c.find("buffer", b.name);
    if (!r) throw CheckpointError("checkpoint: missing buffer '" + b.name + "'");
    detail::restore_tensor(*r, *b.tensor);
  }
  if (opt) {
    const auto& op = opt->parameters();
    for (std::size_t i = 0; i < op.size(); ++i) {
      const auto* m = c.find("adam_m", op[i].name);
      const auto* v = c.find("adam_v", op[i].name);
      if (!m || !v) throw CheckpointError("checkpoint: missing optimizer state for '" + op[i].name + "'");
      detail::restore_tensor(*m, opt->moments()[i].m);
      detail::restore_tensor(*v, opt->moments()[i].v);
    }
    opt->set_steps(c.optimizer_steps);
  }
  if (rng && !c.rng_state.empty()) {
    std::istringstream is(c.rng_state);
    is >> *rng;
    if (!is) throw CheckpointError("checkpoint: malformed rng state");
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, SmlpNet<T>& net, const AdamW<T>* opt = nullptr,
                     std::uint64_t epoch = 0, const Rng* rng = nullptr) {
  write_checkpoint_file(path, capture_checkpoint(net, opt, epoch, rng));
}

// Rebuilds the network described by a checkpoint and loads its weights.
template <typename T = float>
SmlpNet<T> load_model(const std::filesystem::path& path) {
  const Checkpoint c = read_checkpoint_file(path);
  SmlpNet<T> net(c.model_config());
  restore_checkpoint(c, net);
  return net;
}

}  // namespace smlp
