#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "logo/tensor.hpp"

namespace logo {

// -log softmax(logits)[target] via log-sum-exp. logits is [C]; returns a scalar.
Tensor cross_entropy(const Tensor& logits, std::size_t target);

// Softmax over the C-1 logits other than `target`, remaining classes in order.
Tensor non_target_distribution(const Tensor& logits, std::size_t target);

// Symmetric KL divergence D(u'||p') + D(p'||u') between the uniform
// distribution u' over the non-target classes and p' above. Written as
// sum_c (p'_c - u'_c)(ln p'_c - ln u'_c), which is the same quantity with
// every summand non-negative.
Tensor compact_term(const Tensor& logits, std::size_t target);

struct LossBreakdown {
  double cross_entropy = 0.0;
  double compact_term = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  Tensor objective;  // scalar, differentiable when logits are traced
};

// cross_entropy + lambda * compact_term.
LossBreakdown total_loss(const Tensor& logits, std::size_t target, double lambda);

struct Metrics {
  std::vector<double> per_class_recall;  // 0 for classes without support
  std::vector<std::size_t> support;
  std::vector<std::vector<std::size_t>> confusion;  // [label][prediction]
  // Classes left out of the UAR mean because no sample carries their label.
  std::vector<std::size_t> zero_support_classes;
  double uar = 0.0;
  double war = 0.0;
};

Metrics evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                 std::size_t num_classes);

std::size_t argmax(const Tensor& logits);

}  // namespace logo
