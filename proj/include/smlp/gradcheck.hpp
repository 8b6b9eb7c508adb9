#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "smlp/autograd.hpp"
#include "smlp/layers.hpp"

namespace smlp {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "input[i]" or "<param name>[i]"
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

namespace detail {

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

// All indices, or `limit` distinct indices drawn at random when smaller.
inline std::vector<std::size_t> coordinates(std::size_t n, std::size_t limit, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (limit == 0 || limit >= n) return idx;
  for (std::size_t i = 0; i < limit; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(limit);
  return idx;
}

}  // namespace detail

// Compares tape gradients of the scalar f(x) against central differences
// (f(x + eps e) - f(x - eps e)) / 2 eps, for every coordinate of x and of the
// listed parameters. `max_coords` > 0 samples that many coordinates per tensor.
// f: (Tape<double>&, Var<double> x) -> scalar Var<double>.
template <typename F>
GradcheckResult gradcheck(F&& f, const Tensor<double>& x, double eps = 1e-5, const ParameterList<double>& params = {},
                          std::size_t max_coords = 0, std::uint64_t seed = 0) {
  for (const auto& p : params) p.param->zero_grad();
  Tensor<double> gx;
  {
    Tape<double> tape;
    Var<double> xv = tape.input(x);
    Var<double> loss = f(tape, xv);
    tape.backward(loss);
    gx = tape.grad(xv);
  }

  auto evaluate = [&](const Tensor<double>& at) {
    Tape<double> tape(false);
    return f(tape, tape.input(at, false)).value().item();
  };

  GradcheckResult result;
  auto consider = [&](double analytic, double numeric, const std::string& where) {
    const double err = detail::relative_error(analytic, numeric);
    ++result.checked;
    if (result.checked == 1 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = where;
      result.analytic = analytic;
      result.numeric = numeric;
    }
  };

  Rng rng(seed);
  Tensor<double> probe = x;
  for (auto i : detail::coordinates(x.size(), max_coords, rng)) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = evaluate(probe);
    probe[i] = orig - eps;
    const double down = evaluate(probe);
    probe[i] = orig;
    consider(gx[i], (up - down) / (2 * eps), "input[" + std::to_string(i) + "]");
  }

  for (const auto& p : params) {
    auto& value = p.param->value;
    const Tensor<double> analytic = p.param->grad.shape() == value.shape() ? p.param->grad : Tensor<double>(value.shape());
    for (auto i : detail::coordinates(value.size(), max_coords, rng)) {
      const double orig = value[i];
      value[i] = orig + eps;
      const double up = evaluate(x);
      value[i] = orig - eps;
      const double down = evaluate(x);
      value[i] = orig;
      consider(analytic[i], (up - down) / (2 * eps), p.name + "[" + std::to_string(i) + "]");
    }
  }
  return result;
}

// Fixed random projection of an output onto a scalar, so every output
// coordinate contributes an O(1) gradient.
inline Tensor<double> random_projection(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> r(shape);
  for (auto& v : r.data()) v = 2.0 * uniform01(rng) - 1.0;
  return r;
}

}  // namespace smlp
