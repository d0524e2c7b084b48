#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "logo/errors.hpp"

namespace logo {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Tape;

// Dense row-major array of doubles. A tensor may be attached to a Tape, in
// which case operations consuming it are recorded for reverse-mode
// differentiation. The tape must outlive every tensor attached to it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor filled(Shape shape, double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  Shape strides() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool traced() const { return tape_ != nullptr; }
  std::optional<std::size_t> grad_id() const;
  Tape* tape() const { return tape_; }

  // Same values, no tape attachment.
  Tensor detached() const;

 private:
  friend class Tape;

  Shape shape_;
  std::vector<double> data_;
  Tape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// Accumulates into grad_in[i] (already shaped like input i) or skips it when
// grad_in[i] is null because input i does not require a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

struct TapeNode {
  std::string_view kind;
  std::vector<std::optional<std::size_t>> inputs;
  Shape shape;
  BackwardFn backward;
};

// Records operations in execution order; node inputs always precede the node.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable input.
  Tensor leaf(const Tensor& value);

  Tensor record(std::string_view kind, Tensor out, std::initializer_list<const Tensor*> inputs,
                BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

 private:
  std::vector<TapeNode> nodes_;
  bool frozen_ = false;
};

// Records `out` on the tape shared by the traced inputs, or returns it
// untouched when no input is traced.
Tensor record_op(std::string_view kind, Tensor out, std::initializer_list<const Tensor*> inputs,
                 BackwardFn backward);

class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> by_node) : by_node_(std::move(by_node)) {}

  // d(output)/d(t); zeros when t did not influence the output.
  Tensor of(const Tensor& t) const;
  const std::optional<Tensor>& at_node(std::size_t id) const { return by_node_.at(id); }
  std::size_t size() const { return by_node_.size(); }

 private:
  std::vector<std::optional<Tensor>> by_node_;
};

// Reverse accumulation from a scalar output. Freezes the tape.
Gradients backward(Tape& tape, const Tensor& output);

// Token-pair and multiply-accumulate counters, one set per thread.
struct CostCounter {
  std::uint64_t pair_count = 0;
  // Subset of pair_count where the query or the key is the CLS token.
  std::uint64_t cls_pair_count = 0;
  std::uint64_t mac_count = 0;
};

CostCounter cost_snapshot();
void cost_reset();
void count_pairs(std::uint64_t pairs);
void count_cls_pairs(std::uint64_t pairs);
void count_macs(std::uint64_t macs);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
// x[rows x n] + bias[n] broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

Tensor exp(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sum(const Tensor& a);

Tensor softmax(const Tensor& x, std::size_t axis);
// Along the last axis.
Tensor log_softmax(const Tensor& x);
// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor reshape(const Tensor& a, Shape shape);
// Row i of the result is row indices[i] of x (rows = first axis). Indices may repeat.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);
// Averages consecutive runs of `group` rows of a 2-D tensor.
Tensor mean_groups(const Tensor& x, std::size_t group);

// Multi-head scaled dot-product attention evaluated independently for
// `groups` consecutive row blocks: query block g attends only to key/value
// block g. q is [nq x d], k and v are [nk x d]; heads split d evenly and the
// per-head outputs are concatenated back to [nq x d]. Adds the attended
// (query, key) pairs to the pair counter.
Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t groups,
                         std::size_t heads);

}  // namespace logo
