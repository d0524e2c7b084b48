#pragma once

#include <cstddef>
#include <random>

#include "logo/tensor.hpp"

namespace logo {

// Zero-mean normal entries.
Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

}  // namespace logo
