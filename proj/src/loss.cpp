#include "logo/loss.hpp"

#include <algorithm>
#include <cmath>

namespace logo {

namespace {

void check_logits(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1) throw DimensionError("logits must be a vector, got " + shape_str(logits.shape()));
  if (target >= logits.extent(0)) {
    throw IndexError("target class " + std::to_string(target) + " out of range for " +
                     std::to_string(logits.extent(0)) + " classes");
  }
}

Tensor non_target_logits(const Tensor& logits, std::size_t target) {
  check_logits(logits, target);
  const std::size_t classes = logits.extent(0);
  if (classes < 2) throw ContractError("need at least 2 classes to form a non-target distribution");
  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < classes; ++c)
    if (c != target) keep.push_back(c);
  return gather_rows(logits, keep);
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
  check_logits(logits, target);
  const std::size_t pick[] = {target};
  return reshape(scale(gather_rows(log_softmax(logits), pick), -1.0), {});
}

Tensor non_target_distribution(const Tensor& logits, std::size_t target) {
  return softmax(non_target_logits(logits, target), 0);
}

Tensor compact_term(const Tensor& logits, std::size_t target) {
  Tensor log_p = log_softmax(non_target_logits(logits, target));
  const double log_u = -std::log(static_cast<double>(log_p.extent(0)));
  // exp(log_u) rather than 1/(C-1) keeps each (p - u) on the same side of
  // zero as (log_p - log_u).
  const double u = std::exp(log_u);
  return sum(mul(add_scalar(exp(log_p), -u), add_scalar(log_p, -log_u)));
}

LossBreakdown total_loss(const Tensor& logits, std::size_t target, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("lambda must be non-negative, got " + std::to_string(lambda));
  LossBreakdown out;
  Tensor ce = cross_entropy(logits, target);
  out.cross_entropy = ce.item();
  out.lambda = lambda;
  if (lambda == 0.0) {
    out.compact_term = compact_term(logits.detached(), target).item();
    out.objective = ce;
  } else {
    Tensor term = compact_term(logits, target);
    out.compact_term = term.item();
    out.objective = add(ce, scale(term, lambda));
  }
  out.total = out.objective.item();
  return out;
}

Metrics evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                 std::size_t num_classes) {
  if (predictions.size() != labels.size()) {
    throw ContractError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("evaluate: no samples");
  Metrics m;
  m.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes || predictions[i] >= num_classes) {
      throw ContractError("evaluate: class index out of range at sample " + std::to_string(i));
    }
    ++m.confusion[labels[i]][predictions[i]];
  }
  m.per_class_recall.assign(num_classes, 0.0);
  m.support.assign(num_classes, 0);
  std::size_t correct = 0, counted = 0;
  double recall_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (auto n : m.confusion[c]) m.support[c] += n;
    correct += m.confusion[c][c];
    if (m.support[c] == 0) {
      m.zero_support_classes.push_back(c);
      continue;
    }
    m.per_class_recall[c] = static_cast<double>(m.confusion[c][c]) / static_cast<double>(m.support[c]);
    recall_sum += m.per_class_recall[c];
    ++counted;
  }
  m.uar = recall_sum / static_cast<double>(counted);
  m.war = static_cast<double>(correct) / static_cast<double>(labels.size());
  return m;
}

std::size_t argmax(const Tensor& logits) {
  auto d = logits.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

}  // namespace logo
