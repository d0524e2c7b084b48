#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "logo/harness.hpp"

namespace testing {

inline logo::Tensor random_tensor(logo::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  logo::Tensor t(std::move(shape));
  for (auto& x : t.data()) x = dist(rng);
  return t;
}

inline double max_abs_diff(const logo::Tensor& a, const logo::Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(const logo::Tensor& a, const logo::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

using ScalarFn = std::function<logo::Tensor(const std::vector<logo::Tensor>&)>;

// Max relative error between tape gradients of f and central differences,
// over every element of every input.
inline double gradcheck_inputs(const ScalarFn& f, std::vector<logo::Tensor> inputs, double step = 1e-5) {
  logo::Tape tape;
  std::vector<logo::Tensor> traced;
  for (const auto& x : inputs) traced.push_back(tape.leaf(x));
  const logo::Tensor out = f(traced);
  const logo::Gradients grads = logo::backward(tape, out);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const logo::Tensor analytic = grads.of(traced[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i][j];
      inputs[i][j] = saved + step;
      const double up = f(inputs).item();
      inputs[i][j] = saved - step;
      const double down = f(inputs).item();
      inputs[i][j] = saved;
      worst = std::max(worst, logo::relative_error(analytic[j], (up - down) / (2.0 * step)));
    }
  }
  return worst;
}

// Reduces a tensor to a scalar with fixed random weights so every output
// element carries a distinct gradient.
inline logo::Tensor weighted_sum(const logo::Tensor& t, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return logo::sum(logo::mul(t, random_tensor(t.shape(), rng)));
}

inline logo::ClipFeatures random_clip(const logo::ModelConfig& c, std::mt19937_64& rng) {
  return logo::ClipFeatures::from(random_tensor({c.frames, c.height, c.width, c.channels}, rng));
}

}  // namespace testing
