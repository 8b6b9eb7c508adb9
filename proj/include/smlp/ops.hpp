#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "smlp/autograd.hpp"
#include "smlp/tensor.hpp"

// Differentiable operations. Every op computes its forward value eagerly and,
// when the tape is recording and an input needs a gradient, registers the
// matching backward rule.
namespace smlp {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;

template <typename T>
ConstMatrixMap<T> as_matrix(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                           static_cast<Eigen::Index>(cols));
}

template <typename T>
MatrixMap<T> as_matrix(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatrixMap<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + smlp::to_string(a) + " vs " +
                     smlp::to_string(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     smlp::to_string(s));
  }
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank(av.shape(), 2, "matmul");
  detail::require_rank(bv.shape(), 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, a is " + smlp::to_string(av.shape()) + " and b is " +
                     smlp::to_string(bv.shape()));
  }
  Tensor<T> out({m, n});
  detail::as_matrix(out, m, n).noalias() = detail::as_matrix(av, m, k) * detail::as_matrix(bv, k, n);
  return tape.record(std::move(out), {a, b}, [m, k, n](Tape<T>& t, std::size_t node) {
    const auto& g = t.grad_of(node);
    const auto ia = t.input_id(node, 0), ib = t.input_id(node, 1);
    if (t.needs_grad(ia)) {
      Tensor<T> ga({m, k});
      detail::as_matrix(ga, m, k).noalias() =
          detail::as_matrix(g, m, n) * detail::as_matrix(t.value(ib), k, n).transpose();
      t.accumulate(ia, std::move(ga));
    }
    if (t.needs_grad(ib)) {
      Tensor<T> gb({k, n});
      detail::as_matrix(gb, k, n).noalias() =
          detail::as_matrix(t.value(ia), m, k).transpose() * detail::as_matrix(g, m, n);
      t.accumulate(ib, std::move(gb));
    }
  });
}

template <typename T>
Var<T> permute(Var<T> x, std::vector<std::size_t> axes) {
  auto out = permute_values(x.value(), axes);
  return x.tape->record(std::move(out), {x}, [inv = inverse_permutation(axes)](Tape<T>& t, std::size_t node) {
    t.accumulate(t.input_id(node, 0), permute_values(t.grad_of(node), inv));
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [](Tape<T>& t, std::size_t node) {
    const auto in = t.input_id(node, 0);
    t.accumulate(in, t.grad_of(node).reshaped(t.value(in).shape()));
  });
}

// a + b; b may also be a single-element tensor, added to every entry.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool scalar_rhs = bv.size() == 1 && av.shape() != bv.shape();
  if (!scalar_rhs) detail::require_same_shape(av.shape(), bv.shape(), "add");
  Tensor<T> out = av;
  auto o = out.data();
  if (scalar_rhs) {
    for (auto& v : o) v += bv[0];
  } else {
    auto r = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += r[i];
  }
  return a.tape->record(std::move(out), {a, b}, [scalar_rhs](Tape<T>& t, std::size_t node) {
    const auto& g = t.grad_of(node);
    t.accumulate(t.input_id(node, 0), g);
    const auto ib = t.input_id(node, 1);
    if (!t.needs_grad(ib)) return;
    if (scalar_rhs) {
      T s{0};
      for (auto v : g.data()) s += v;
      t.accumulate(ib, Tensor<T>(t.value(ib).shape(), s));
    } else {
      t.accumulate(ib, g);
    }
  });
}

// Elementwise product; b may be a single-element tensor.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  const bool scalar_rhs = bv.size() == 1 && av.shape() != bv.shape();
  if (!scalar_rhs) detail::require_same_shape(av.shape(), bv.shape(), "mul");
  Tensor<T> out = av;
  auto o = out.data();
  if (scalar_rhs) {
    for (auto& v : o) v *= bv[0];
  } else {
    auto r = bv.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= r[i];
  }
  return a.tape->record(std::move(out), {a, b}, [scalar_rhs](Tape<T>& t, std::size_t node) {
    const auto& g = t.grad_of(node).data();
    const auto ia = t.input_id(node, 0), ib = t.input_id(node, 1);
    const auto& av = t.value(ia);
    const auto& bv = t.value(ib);
    if (t.needs_grad(ia)) {
      Tensor<T> ga(av.shape());
      auto d = ga.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * (scalar_rhs ? bv[0] : bv[i]);
      t.accumulate(ia, std::move(ga));
    }
    if (t.needs_grad(ib)) {
      if (scalar_rhs) {
        T s{0};
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
        t.accumulate(ib, Tensor<T>(bv.shape(), s));
      } else {
        Tensor<T> gb(bv.shape());
        auto d = gb.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * av[i];
        t.accumulate(ib, std::move(gb));
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= s;
  return x.tape->record(std::move(out), {x}, [s](Tape<T>& t, std::size_t node) {
    Tensor<T> g = t.grad_of(node);
    for (auto& v : g.data()) v *= s;
    t.accumulate(t.input_id(node, 0), std::move(g));
  });
}

// Exact GeLU, x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = detail::gelu_value(v);
  return x.tape->record(std::move(out), {x}, [](Tape<T>& t, std::size_t node) {
    const auto in = t.input_id(node, 0);
    const auto& xv = t.value(in).data();
    Tensor<T> g = t.grad_of(node);
    auto d = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= detail::gelu_derivative(xv[i]);
    t.accumulate(in, std::move(g));
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (auto v : x.value().data()) s += v;
  return x.tape->record(Tensor<T>::scalar(s), {x}, [](Tape<T>& t, std::size_t node) {
    const auto in = t.input_id(node, 0);
    t.accumulate(in, Tensor<T>(t.value(in).shape(), t.grad_of(node)[0]));
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().size()));
}

// y = x W^T + b over the last axis; W is (out, in). Leading axes act as batch.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, const Var<T>* bias) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  detail::require_rank(wv.shape(), 2, "linear");
  const std::size_t out_f = wv.dim(0), in_f = wv.dim(1);
  if (xv.rank() == 0 || xv.shape().back() != in_f) {
    throw ShapeError("linear: input trailing extent must be " + std::to_string(in_f) + ", got shape " +
                     smlp::to_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / in_f;
  Shape out_shape = xv.shape();
  out_shape.back() = out_f;
  Tensor<T> out(out_shape);
  auto om = detail::as_matrix(out, rows, out_f);
  om.noalias() = detail::as_matrix(xv, rows, in_f) * detail::as_matrix(wv, out_f, in_f).transpose();
  std::vector<Var<T>> inputs{x, weight};
  if (bias) {
    const auto& bv = bias->value();
    if (bv.size() != out_f) throw ShapeError("linear: bias extent does not match output features");
    om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bv.data().data(),
                                                                          static_cast<Eigen::Index>(out_f));
    inputs.push_back(*bias);
  }
  const bool has_bias = bias != nullptr;
  return x.tape->record(std::move(out), inputs, [rows, in_f, out_f, has_bias](Tape<T>& t, std::size_t node) {
    const auto& g = t.grad_of(node);
    const auto ix = t.input_id(node, 0), iw = t.input_id(node, 1);
    auto gm = detail::as_matrix(g, rows, out_f);
    if (t.needs_grad(ix)) {
      Tensor<T> gx(t.value(ix).shape());
      detail::as_matrix(gx, rows, in_f).noalias() = gm * detail::as_matrix(t.value(iw), out_f, in_f);
      if (debug::perturb_backward) {
        for (auto& v : gx.data()) v *= T(1.01);
      }
      t.accumulate(ix, std::move(gx));
    }
    if (t.needs_grad(iw)) {
      Tensor<T> gw({out_f, in_f});
      detail::as_matrix(gw, out_f, in_f).noalias() = gm.transpose() * detail::as_matrix(t.value(ix), rows, in_f);
      t.accumulate(iw, std::move(gw));
    }
    if (has_bias) {
      const auto ib = t.input_id(node, 2);
      if (t.needs_grad(ib)) {
        Tensor<T> gb({out_f});
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data().data(), static_cast<Eigen::Index>(out_f)) =
            gm.colwise().sum();
        t.accumulate(ib, std::move(gb));
      }
    }
  });
}

// Concatenates along the last axis; all other extents must agree.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = xs.front().shape();
  if (first.empty()) throw ShapeError("concat: inputs must have rank >= 1");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
      throw ShapeError("concat: leading extents differ: " + smlp::to_string(first) + " vs " + smlp::to_string(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  const std::size_t rows = xs.front().value().size() / first.back();
  Shape out_shape = first;
  out_shape.back() = total;
  Tensor<T> out(out_shape);
  auto o = out.data();
  std::size_t col = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto src = xs[k].value().data();
    const std::size_t w = widths[k];
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(src.data() + r * w, w, o.data() + r * total + col);
    col += w;
  }
  return xs.front().tape->record(std::move(out), xs, [widths, rows, total](Tape<T>& t, std::size_t node) {
    auto g = t.grad_of(node).data();
    std::size_t col = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const auto id = t.input_id(node, k);
      const std::size_t w = widths[k];
      if (t.needs_grad(id)) {
        Tensor<T> gk(t.value(id).shape());
        auto d = gk.data();
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(g.data() + r * total + col, w, d.data() + r * w);
        t.accumulate(id, std::move(gk));
      }
      col += w;
    }
  });
}

// x[..., c] * w[c]
template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> w) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  const std::size_t c = wv.size();
  if (xv.rank() == 0 || xv.shape().back() != c) {
    throw ShapeError("channel_scale: channel extent mismatch, input " + smlp::to_string(xv.shape()) +
                     " weights " + smlp::to_string(wv.shape()));
  }
  Tensor<T> out = xv;
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= wv[i % c];
  return x.tape->record(std::move(out), {x, w}, [c](Tape<T>& t, std::size_t node) {
    auto g = t.grad_of(node).data();
    const auto ix = t.input_id(node, 0), iw = t.input_id(node, 1);
    const auto& xv = t.value(ix);
    const auto& wv = t.value(iw);
    if (t.needs_grad(ix)) {
      Tensor<T> gx(xv.shape());
      auto d = gx.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * wv[i % c];
      t.accumulate(ix, std::move(gx));
    }
    if (t.needs_grad(iw)) {
      Tensor<T> gw(wv.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gw[i % c] += g[i] * xv[i];
      t.accumulate(iw, std::move(gw));
    }
  });
}

// Multiplies sample n of a batch-leading tensor by scales[n] (constant).
template <typename T>
Var<T> sample_scale(Var<T> x, std::vector<T> scales) {
  const auto& xv = x.value();
  if (xv.rank() == 0 || xv.dim(0) != scales.size()) {
    throw ShapeError("sample_scale: need one scale per sample of " + smlp::to_string(xv.shape()));
  }
  const std::size_t per = xv.size() / scales.size();
  Tensor<T> out = xv;
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= scales[i / per];
  return x.tape->record(std::move(out), {x}, [scales = std::move(scales), per](Tape<T>& t, std::size_t node) {
    Tensor<T> g = t.grad_of(node);
    auto d = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= scales[i / per];
    t.accumulate(t.input_id(node, 0), std::move(g));
  });
}

// Depthwise 3x3 cross-correlation on (N,H,W,C), stride 1, zero padding 1.
// kernel is (C,3,3); bias is (C) or null.
template <typename T>
Var<T> dwconv3x3(Var<T> x, Var<T> kernel, const Var<T>* bias) {
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  detail::require_rank(xv.shape(), 4, "dwconv3x3");
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (kv.shape() != Shape{c, 3, 3}) {
    throw ShapeError("dwconv3x3: kernels " + smlp::to_string(kv.shape()) + " do not match " + std::to_string(c) +
                     " input channels");
  }
  if (bias && bias->value().size() != c) throw ShapeError("dwconv3x3: bias extent mismatch");

  // taps[t*c + ch] = kernel[ch, t/3, t%3], channel-contiguous for the inner loop.
  std::vector<T> taps(9 * c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t t = 0; t < 9; ++t) taps[t * c + ch] = kv[ch * 9 + t];

  Tensor<T> out(xv.shape());
  auto o = out.data();
  auto in = xv.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        T* dst = o.data() + ((b * h + i) * w + j) * c;
        if (bias) {
          auto bv = bias->value().data();
          std::copy(bv.begin(), bv.end(), dst);
        }
        for (int di = -1; di <= 1; ++di) {
          const auto ii = static_cast<std::ptrdiff_t>(i) + di;
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
          for (int dj = -1; dj <= 1; ++dj) {
            const auto jj = static_cast<std::ptrdiff_t>(j) + dj;
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
            const T* src = in.data() + ((b * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)) * c;
            const T* tap = taps.data() + static_cast<std::size_t>((di + 1) * 3 + (dj + 1)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += tap[ch] * src[ch];
          }
        }
      }
    }
  }

  std::vector<Var<T>> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return x.tape->record(
      std::move(out), inputs,
      [n, h, w, c, has_bias, taps = std::move(taps)](Tape<T>& t, std::size_t node) {
        auto g = t.grad_of(node).data();
        const auto ix = t.input_id(node, 0), ik = t.input_id(node, 1);
        auto in = t.value(ix).data();
        const bool want_x = t.needs_grad(ix), want_k = t.needs_grad(ik);
        Tensor<T> gx = want_x ? Tensor<T>(t.value(ix).shape()) : Tensor<T>();
        std::vector<T> gtaps(want_k ? 9 * c : 0, T{0});
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
              const T* go = g.data() + ((b * h + i) * w + j) * c;
              for (int di = -1; di <= 1; ++di) {
                const auto ii = static_cast<std::ptrdiff_t>(i) + di;
                if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                for (int dj = -1; dj <= 1; ++dj) {
                  const auto jj = static_cast<std::ptrdiff_t>(j) + dj;
                  if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w)) continue;
                  const std::size_t src_off =
                      ((b * h + static_cast<std::size_t>(ii)) * w + static_cast<std::size_t>(jj)) * c;
                  const std::size_t tap_off = static_cast<std::size_t>((di + 1) * 3 + (dj + 1)) * c;
                  if (want_x) {
                    T* dx = gx.data().data() + src_off;
                    const T* tap = taps.data() + tap_off;
                    for (std::size_t ch = 0; ch < c; ++ch) dx[ch] += tap[ch] * go[ch];
                  }
                  if (want_k) {
                    T* dk = gtaps.data() + tap_off;
                    const T* src = in.data() + src_off;
                    for (std::size_t ch = 0; ch < c; ++ch) dk[ch] += src[ch] * go[ch];
                  }
                }
              }
            }
          }
        }
        if (want_x) t.accumulate(ix, std::move(gx));
        if (want_k) {
          Tensor<T> gk({c, 3, 3});
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t tp = 0; tp < 9; ++tp) gk[ch * 9 + tp] = gtaps[tp * c + ch];
          t.accumulate(ik, std::move(gk));
        }
        if (has_bias) {
          const auto ib = t.input_id(node, 2);
          if (t.needs_grad(ib)) {
            Tensor<T> gb({c});
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
            t.accumulate(ib, std::move(gb));
          }
        }
      });
}

namespace detail {

// Backward of y = xhat * gamma + beta where xhat = (x - mean) * inv_std and
// the statistics were computed from x. `per_channel` selects batch-norm layout
// (statistics per channel over rows) vs layer-norm layout (per row over channels).
template <typename T>
void normalized_backward(std::span<const T> g, std::span<const T> xhat, std::span<const T> gamma,
                         std::span<const T> inv_std, std::size_t rows, std::size_t channels, bool per_channel,
                         std::span<T> gx) {
  if (per_channel) {
    std::vector<T> sum_d(channels, T{0}), sum_dx(channels, T{0});
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = r * channels + ch;
        const T d = g[i] * gamma[ch];
        sum_d[ch] += d;
        sum_dx[ch] += d * xhat[i];
      }
    }
    const T inv_m = T(1) / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = r * channels + ch;
        const T d = g[i] * gamma[ch];
        gx[i] += inv_std[ch] * (d - sum_d[ch] * inv_m - xhat[i] * sum_dx[ch] * inv_m);
      }
    }
  } else {
    const T inv_c = T(1) / static_cast<T>(channels);
    for (std::size_t r = 0; r < rows; ++r) {
      T sd{0}, sdx{0};
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = r * channels + ch;
        const T d = g[i] * gamma[ch];
        sd += d;
        sdx += d * xhat[i];
      }
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const std::size_t i = r * channels + ch;
        const T d = g[i] * gamma[ch];
        gx[i] += inv_std[r] * (d - sd * inv_c - xhat[i] * sdx * inv_c);
      }
    }
  }
}

template <typename T>
void affine_param_grads(Tape<T>& t, std::size_t node, std::span<const T> g, std::span<const T> xhat,
                        std::size_t channels) {
  const auto ig = t.input_id(node, 1), ib = t.input_id(node, 2);
  if (t.needs_grad(ig)) {
    Tensor<T> gg({channels});
    for (std::size_t i = 0; i < g.size(); ++i) gg[i % channels] += g[i] * xhat[i];
    t.accumulate(ig, std::move(gg));
  }
  if (t.needs_grad(ib)) {
    Tensor<T> gb({channels});
    for (std::size_t i = 0; i < g.size(); ++i) gb[i % channels] += g[i];
    t.accumulate(ib, std::move(gb));
  }
}

}  // namespace detail

// Layer normalization over the last axis (population variance).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const std::size_t c = gamma.value().size();
  if (xv.rank() == 0 || xv.shape().back() != c || beta.value().size() != c) {
    throw ShapeError("layer_norm: channel extent mismatch for input " + smlp::to_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / c;
  auto in = xv.data();
  auto gm = gamma.value().data();
  auto bt = beta.value().data();
  std::vector<T> xhat(xv.size());
  std::vector<T> inv_std(rows);
  Tensor<T> out(xv.shape());
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * c;
    T mu{0};
    for (std::size_t ch = 0; ch < c; ++ch) mu += row[ch];
    mu /= static_cast<T>(c);
    T var{0};
    for (std::size_t ch = 0; ch < c; ++ch) var += (row[ch] - mu) * (row[ch] - mu);
    var /= static_cast<T>(c);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      xhat[i] = (row[ch] - mu) * inv_std[r];
      o[i] = xhat[i] * gm[ch] + bt[ch];
    }
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t node) {
                          auto g = t.grad_of(node).data();
                          const auto ix = t.input_id(node, 0);
                          if (t.needs_grad(ix)) {
                            Tensor<T> gx(t.value(ix).shape());
                            detail::normalized_backward<T>(g, xhat, t.value(t.input_id(node, 1)).data(), inv_std,
                                                           rows, c, false, gx.data());
                            t.accumulate(ix, std::move(gx));
                          }
                          detail::affine_param_grads<T>(t, node, g, xhat, c);
                        });
}

// Batch normalization over all leading axes of a channels-last tensor using
// the statistics of the batch itself. Writes the batch mean and population
// variance to the out-parameters.
template <typename T>
Var<T> batch_norm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps, std::vector<T>& batch_mean,
                        std::vector<T>& batch_var) {
  const auto& xv = x.value();
  const std::size_t c = gamma.value().size();
  if (xv.rank() == 0 || xv.shape().back() != c || beta.value().size() != c) {
    throw ShapeError("batch_norm: channel extent mismatch for input " + smlp::to_string(xv.shape()));
  }
  const std::size_t rows = xv.size() / c;
  auto in = xv.data();
  batch_mean.assign(c, T{0});
  batch_var.assign(c, T{0});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) batch_mean[ch] += in[r * c + ch];
  for (auto& m : batch_mean) m /= static_cast<T>(rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T d = in[r * c + ch] - batch_mean[ch];
      batch_var[ch] += d * d;
    }
  for (auto& v : batch_var) v /= static_cast<T>(rows);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(batch_var[ch] + eps);

  auto gm = gamma.value().data();
  auto bt = beta.value().data();
  std::vector<T> xhat(xv.size());
  Tensor<T> out(xv.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    const std::size_t ch = i % c;
    xhat[i] = (in[i] - batch_mean[ch]) * inv_std[ch];
    o[i] = xhat[i] * gm[ch] + bt[ch];
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [rows, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t node) {
                          auto g = t.grad_of(node).data();
                          const auto ix = t.input_id(node, 0);
                          if (t.needs_grad(ix)) {
                            Tensor<T> gx(t.value(ix).shape());
                            detail::normalized_backward<T>(g, xhat, t.value(t.input_id(node, 1)).data(), inv_std,
                                                           rows, c, true, gx.data());
                            t.accumulate(ix, std::move(gx));
                          }
                          detail::affine_param_grads<T>(t, node, g, xhat, c);
                        });
}

// Batch normalization with fixed statistics: a per-channel affine map.
template <typename T>
Var<T> batch_norm_eval(Var<T> x, Var<T> gamma, Var<T> beta, std::span<const T> mean, std::span<const T> var, T eps) {
  const auto& xv = x.value();
  const std::size_t c = gamma.value().size();
  if (xv.rank() == 0 || xv.shape().back() != c || beta.value().size() != c) {
    throw ShapeError("batch_norm: channel extent mismatch for input " + smlp::to_string(xv.shape()));
  }
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(var[ch] + eps);
  auto in = xv.data();
  auto gm = gamma.value().data();
  auto bt = beta.value().data();
  std::vector<T> xhat(xv.size());
  Tensor<T> out(xv.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < xhat.size(); ++i) {
    const std::size_t ch = i % c;
    xhat[i] = (in[i] - mean[ch]) * inv_std[ch];
    o[i] = xhat[i] * gm[ch] + bt[ch];
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, std::size_t node) {
                          auto g = t.grad_of(node).data();
                          const auto ix = t.input_id(node, 0);
                          if (t.needs_grad(ix)) {
                            auto gm = t.value(t.input_id(node, 1)).data();
                            Tensor<T> gx(t.value(ix).shape());
                            auto d = gx.data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * gm[i % c] * inv_std[i % c];
                            t.accumulate(ix, std::move(gx));
                          }
                          detail::affine_param_grads<T>(t, node, g, xhat, c);
                        });
}

namespace detail {

// Index map for (N,H,W,C) -> (N,H/k,W/k,k*k*C) with inner order (dy, dx, c).
inline std::size_t space_to_depth_source(std::size_t flat_out, std::size_t h, std::size_t w, std::size_t c,
                                         std::size_t k) {
  const std::size_t oc = k * k * c, ow = w / k, oh = h / k;
  std::size_t rem = flat_out;
  const std::size_t ch_out = rem % oc;
  rem /= oc;
  const std::size_t j = rem % ow;
  rem /= ow;
  const std::size_t i = rem % oh;
  const std::size_t b = rem / oh;
  const std::size_t ch = ch_out % c;
  const std::size_t dx = (ch_out / c) % k;
  const std::size_t dy = ch_out / (c * k);
  return ((b * h + i * k + dy) * w + j * k + dx) * c + ch;
}

}  // namespace detail

// Gathers non-overlapping k x k neighbourhoods into the channel axis.
template <typename T>
Var<T> space_to_depth(Var<T> x, std::size_t k) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 4, "space_to_depth");
  const std::size_t n = xv.dim(0), h = xv.dim(1), w = xv.dim(2), c = xv.dim(3);
  if (k == 0 || h % k != 0 || w % k != 0) {
    throw ShapeError("space_to_depth: spatial extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " are not divisible by " + std::to_string(k));
  }
  Tensor<T> out({n, h / k, w / k, k * k * c});
  auto o = out.data();
  auto in = xv.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[detail::space_to_depth_source(i, h, w, c, k)];
  return x.tape->record(std::move(out), {x}, [h, w, c, k](Tape<T>& t, std::size_t node) {
    auto g = t.grad_of(node).data();
    const auto ix = t.input_id(node, 0);
    Tensor<T> gx(t.value(ix).shape());
    for (std::size_t i = 0; i < g.size(); ++i) gx[detail::space_to_depth_source(i, h, w, c, k)] += g[i];
    t.accumulate(ix, std::move(gx));
  });
}

// Global average pool over the spatial axes: (N,H,W,C) -> (N,C).
template <typename T>
Var<T> mean_tokens(Var<T> x) {
  const auto& xv = x.value();
  detail::require_rank(xv.shape(), 4, "mean_tokens");
  const std::size_t n = xv.dim(0), tokens = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor<T> out({n, c});
  auto in = xv.data();
  const T inv = T(1) / static_cast<T>(tokens);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < tokens; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) out[b * c + ch] += in[(b * tokens + p) * c + ch] * inv;
  return x.tape->record(std::move(out), {x}, [n, tokens, c, inv](Tape<T>& t, std::size_t node) {
    auto g = t.grad_of(node).data();
    const auto ix = t.input_id(node, 0);
    Tensor<T> gx(t.value(ix).shape());
    auto d = gx.data();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < tokens; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) d[(b * tokens + p) * c + ch] = g[b * c + ch] * inv;
    t.accumulate(ix, std::move(gx));
  });
}

// Mean cross-entropy of softmax(logits) against the smoothed target:
// (1 - eps) on the true class, eps / (K - 1) elsewhere.
template <typename T>
Var<T> label_smoothing_ce(Var<T> logits, std::span<const int> labels, T eps) {
  const auto& lv = logits.value();
  detail::require_rank(lv.shape(), 2, "label_smoothing_ce");
  const std::size_t n = lv.dim(0), k = lv.dim(1);
  if (labels.size() != n) throw ShapeError("label_smoothing_ce: need one label per row");
  if (!(eps >= T(0) && eps < T(1))) throw ConfigError("label_smoothing_ce: smoothing must lie in [0, 1)");
  if (k < 2 && eps > T(0)) throw ConfigError("label_smoothing_ce: smoothing needs at least two classes");
  const T off = k > 1 ? eps / static_cast<T>(k - 1) : T(0);
  const T on = T(1) - eps;

  std::vector<T> probs(lv.size());
  T loss{0};
  for (std::size_t b = 0; b < n; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw std::out_of_range("label_smoothing_ce: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(k) + ")");
    }
    const T* row = lv.data().data() + b * k;
    const T mx = *std::max_element(row, row + k);
    T z{0};
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const T log_z = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) {
      const T target = j == static_cast<std::size_t>(label) ? on : off;
      const T log_p = row[j] - log_z;
      probs[b * k + j] = std::exp(log_p);
      if (target != T(0)) loss -= target * log_p;
    }
  }
  loss /= static_cast<T>(n);
  std::vector<int> owned(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor<T>::scalar(loss), {logits},
      [n, k, on, off, probs = std::move(probs), owned = std::move(owned)](Tape<T>& t, std::size_t node) {
        const T g = t.grad_of(node)[0] / static_cast<T>(n);
        Tensor<T> gl({n, k});
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t j = 0; j < k; ++j) {
            const T target = j == static_cast<std::size_t>(owned[b]) ? on : off;
            gl[b * k + j] = g * (probs[b * k + j] - target);
          }
        t.accumulate(t.input_id(node, 0), std::move(gl));
      });
}

}  // namespace smlp
