#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smlp/layers.hpp"
#include "smlp/tensor.hpp"

namespace smlp {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cifar {
inline constexpr std::size_t side = 32;
inline constexpr std::size_t plane = side * side;
inline constexpr std::size_t record_bytes = 1 + 3 * plane;
inline constexpr int classes = 10;
}  // namespace cifar

// Images kept as raw bytes in (N, H, W, 3) order; scaling and normalization
// happen when a batch is assembled.
struct Dataset {
  std::size_t height = cifar::side;
  std::size_t width = cifar::side;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t image_bytes() const noexcept { return height * width * 3; }
  const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * image_bytes(); }

  void append(const Dataset& other) {
    if (!empty() && (other.height != height || other.width != width)) {
      throw FormatError("dataset: cannot append images of a different size");
    }
    height = other.height;
    width = other.width;
    pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }

  // First `n` samples (all of them when n is 0 or too large).
  Dataset head(std::size_t n) const {
    if (n == 0 || n >= size()) return *this;
    Dataset d;
    d.height = height;
    d.width = width;
    d.pixels.assign(pixels.begin(), pixels.begin() + static_cast<std::ptrdiff_t>(n * image_bytes()));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    return d;
  }
};

// Records: 1 label byte, then 1024 R, 1024 G, 1024 B bytes, each plane row-major.
inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>") {
  if (bytes.size() % cifar::record_bytes != 0) {
    throw FormatError(source + ": size " + std::to_string(bytes.size()) + " is not a multiple of the " +
                      std::to_string(cifar::record_bytes) + "-byte record size");
  }
  Dataset d;
  const std::size_t n = bytes.size() / cifar::record_bytes;
  d.labels.resize(n);
  d.pixels.resize(n * cifar::plane * 3);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * cifar::record_bytes;
    if (rec[0] >= cifar::classes) {
      throw FormatError(source + ": record " + std::to_string(r) + " has label " + std::to_string(rec[0]) +
                        " (expected 0-9)");
    }
    d.labels[r] = rec[0];
    std::uint8_t* out = d.pixels.data() + r * cifar::plane * 3;
    for (std::size_t p = 0; p < cifar::plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) out[p * 3 + c] = rec[1 + c * cifar::plane + p];
  }
  return d;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Dataset load_cifar10_file(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return parse_cifar10(bytes, path.string());
}

inline std::vector<std::uint8_t> encode_cifar10(const Dataset& d) {
  if (d.height != cifar::side || d.width != cifar::side) throw FormatError("cifar: images must be 32x32");
  std::vector<std::uint8_t> bytes(d.size() * cifar::record_bytes);
  for (std::size_t r = 0; r < d.size(); ++r) {
    std::uint8_t* rec = bytes.data() + r * cifar::record_bytes;
    if (d.labels[r] < 0 || d.labels[r] >= cifar::classes) throw FormatError("cifar: label out of range");
    rec[0] = static_cast<std::uint8_t>(d.labels[r]);
    const std::uint8_t* img = d.image(r);
    for (std::size_t p = 0; p < cifar::plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) rec[1 + c * cifar::plane + p] = img[p * 3 + c];
  }
  return bytes;
}

inline void write_cifar10_file(const std::filesystem::path& path, const Dataset& d) {
  const auto bytes = encode_cifar10(d);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

enum class Split { train, test };

// `root` is either a single batch file or a directory holding the standard
// data_batch_{1..5}.bin / test_batch.bin files (directly or under
// cifar-10-batches-bin/).
inline Dataset load_cifar10(const std::filesystem::path& root, Split split) {
  namespace fs = std::filesystem;
  if (fs::is_regular_file(root)) return load_cifar10_file(root);
  if (!fs::is_directory(root)) throw std::runtime_error("data path " + root.string() + " does not exist");
  fs::path dir = root;
  if (fs::is_directory(root / "cifar-10-batches-bin")) dir = root / "cifar-10-batches-bin";
  std::vector<fs::path> files;
  if (split == Split::test) {
    files.push_back(dir / "test_batch.bin");
  } else {
    for (int i = 1; i <= 5; ++i) {
      const fs::path f = dir / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(f)) files.push_back(f);
    }
  }
  if (files.empty() || !fs::exists(files.front())) {
    throw std::runtime_error("no CIFAR-10 " + std::string(split == Split::test ? "test" : "training") +
                             " batches found under " + root.string());
  }
  Dataset d;
  for (const auto& f : files) d.append(load_cifar10_file(f));
  return d;
}

struct Normalization {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> std{0.2470, 0.2435, 0.2616};
};

struct Augmentation {
  bool flip = true;
  std::size_t pad = 4;
};

template <typename T>
struct Batch {
  Tensor<T> images;  // (N, H, W, 3)
  std::vector<int> labels;
};

// Scales bytes to [0, 1] and normalizes per channel. With `augment`, each image
// is flipped horizontally with probability 1/2 and cropped from a zero-padded
// copy at a random offset in [0, 2 pad].
template <typename T>
Batch<T> make_batch(const Dataset& d, std::span<const std::size_t> indices, const Normalization& norm,
                    const Augmentation* augment = nullptr, Rng* rng = nullptr) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  if (augment && !rng) throw std::logic_error("make_batch: augmentation needs a random generator");
  const std::size_t h = d.height, w = d.width;
  Batch<T> b{Tensor<T>({indices.size(), h, w, 3}), {}};
  b.labels.reserve(indices.size());
  std::array<T, 3> scale{}, shift{};
  for (std::size_t c = 0; c < 3; ++c) {
    scale[c] = static_cast<T>(1.0 / (255.0 * norm.std[c]));
    shift[c] = static_cast<T>(-norm.mean[c] / norm.std[c]);
  }
  auto out = b.images.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t idx = indices[k];
    if (idx >= d.size()) throw std::out_of_range("make_batch: sample index out of range");
    b.labels.push_back(d.labels[idx]);
    bool flip = false;
    long dy = 0, dx = 0;
    if (augment) {
      flip = augment->flip && uniform01(*rng) < 0.5;
      const auto span = static_cast<double>(2 * augment->pad + 1);
      dy = static_cast<long>(uniform01(*rng) * span) - static_cast<long>(augment->pad);
      dx = static_cast<long>(uniform01(*rng) * span) - static_cast<long>(augment->pad);
    }
    const std::uint8_t* img = d.image(idx);
    T* dst = out.data() + k * h * w * 3;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = static_cast<long>(y) + dy;
        const long sx0 = static_cast<long>(x) + dx;
        const long sx = flip ? static_cast<long>(w) - 1 - sx0 : sx0;
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
        for (std::size_t c = 0; c < 3; ++c) {
          const T raw = inside ? static_cast<T>(img[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * 3 + c])
                               : T(0);
          dst[(y * w + x) * 3 + c] = raw * scale[c] + shift[c];
        }
      }
  }
  return b;
}

// Deterministic CIFAR-shaped stand-in: each class is a smooth colour pattern;
// samples are randomly shifted, contrast-scaled copies with pixel noise.
inline Dataset synthetic_cifar(std::size_t count, std::uint64_t seed, double noise = 48.0) {
  constexpr std::size_t waves = 3;
  struct Wave {
    double fy, fx, phase, amp;
  };
  Rng pattern_rng(0x5eedc1f4ULL);
  std::array<std::array<std::array<Wave, waves>, 3>, cifar::classes> patterns{};
  std::array<std::array<double, 3>, cifar::classes> base{};
  for (auto& cls : patterns)
    for (auto& ch : cls)
      for (auto& wv : ch) {
        wv.fy = (uniform01(pattern_rng) * 2.0 - 1.0) * 0.5;
        wv.fx = (uniform01(pattern_rng) * 2.0 - 1.0) * 0.5;
        wv.phase = uniform01(pattern_rng) * 2.0 * std::numbers::pi;
        wv.amp = 25.0 + 35.0 * uniform01(pattern_rng);
      }
  for (auto& b : base)
    for (auto& c : b) c = 70.0 + 110.0 * uniform01(pattern_rng);

  Rng rng(seed);
  Dataset d;
  d.labels.resize(count);
  d.pixels.resize(count * cifar::plane * 3);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % cifar::classes);
    d.labels[i] = label;
    const double oy = (uniform01(rng) - 0.5) * 16.0;
    const double ox = (uniform01(rng) - 0.5) * 16.0;
    const double contrast = 0.5 + uniform01(rng);
    std::uint8_t* img = d.pixels.data() + i * cifar::plane * 3;
    for (std::size_t y = 0; y < cifar::side; ++y)
      for (std::size_t x = 0; x < cifar::side; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          double v = base[label][c];
          for (const auto& wv : patterns[label][c]) {
            v += contrast * wv.amp * std::sin(wv.fy * (static_cast<double>(y) + oy) + wv.fx * (static_cast<double>(x) + ox) + wv.phase);
          }
          v += noise * standard_normal(rng);
          img[(y * cifar::side + x) * 3 + c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
  }
  return d;
}

// Writes data_batch_1.bin and test_batch.bin in the CIFAR-10 binary layout.
inline void write_synthetic_cifar(const std::filesystem::path& dir, std::size_t train_count, std::size_t test_count,
                                  std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_cifar10_file(dir / "data_batch_1.bin", synthetic_cifar(train_count, seed));
  write_cifar10_file(dir / "test_batch.bin", synthetic_cifar(test_count, seed + 1));
}

}  // namespace smlp
