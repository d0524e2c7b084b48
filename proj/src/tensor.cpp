#include "logo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace logo {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

Shape Tensor::strides() const {
  Shape s(shape_.size(), 1);
  for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
  return s;
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) needs a matrix, got " + shape_str(shape_));
  return data_[row * shape_[1] + col];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  return data_[0];
}

std::optional<std::size_t> Tensor::grad_id() const {
  if (!tape_) return std::nullopt;
  return node_;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

// ---- tape -----------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) {
  return record("leaf", value.detached(), {}, nullptr);
}

Tensor Tape::record(std::string_view kind, Tensor out, std::initializer_list<const Tensor*> inputs,
                    BackwardFn backward) {
  if (frozen_) throw TapeError("cannot record '" + std::string(kind) + "' on a frozen tape");
  TapeNode node{kind, {}, out.shape(), std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in->tape_ == this) {
      node.inputs.emplace_back(in->node_);
    } else if (in->tape_ == nullptr) {
      node.inputs.emplace_back(std::nullopt);
    } else {
      throw TapeError("operation '" + std::string(kind) + "' mixes tensors from different tapes");
    }
  }
  out.tape_ = this;
  out.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return out;
}

Tensor record_op(std::string_view kind, Tensor out, std::initializer_list<const Tensor*> inputs,
                 BackwardFn backward) {
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->traced()) continue;
    if (tape && tape != in->tape()) {
      throw TapeError("operation '" + std::string(kind) + "' mixes tensors from different tapes");
    }
    tape = in->tape();
  }
  if (!tape) return out;
  return tape->record(kind, std::move(out), inputs, std::move(backward));
}

Tensor Gradients::of(const Tensor& t) const {
  auto id = t.grad_id();
  if (id && *id < by_node_.size() && by_node_[*id]) return *by_node_[*id];
  return Tensor(t.shape());
}

Gradients backward(Tape& tape, const Tensor& output) {
  if (output.size() != 1) {
    throw ContractError("backward needs a scalar output, got " + shape_str(output.shape()));
  }
  if (output.tape() != &tape) throw TapeError("backward output was not produced on this tape");
  tape.freeze();

  std::vector<std::optional<Tensor>> grads(tape.size());
  const std::size_t root = *output.grad_id();
  grads[root] = Tensor::filled(output.shape(), 1.0);

  std::vector<Tensor*> grad_in;
  for (std::size_t id = root + 1; id-- > 0;) {
    if (!grads[id]) continue;
    const TapeNode& node = tape.node(id);
    if (!node.backward) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      if (!node.inputs[i]) continue;
      auto& slot = grads[*node.inputs[i]];
      if (!slot) slot = Tensor(tape.node(*node.inputs[i]).shape);
      grad_in[i] = &*slot;
    }
    node.backward(*grads[id], grad_in);
  }
  return Gradients(std::move(grads));
}

// ---- cost counters ----------------------------------------------------------

namespace {
thread_local CostCounter g_counter;
}

CostCounter cost_snapshot() { return g_counter; }
void cost_reset() { g_counter = {}; }
void count_pairs(std::uint64_t pairs) { g_counter.pair_count += pairs; }
void count_cls_pairs(std::uint64_t pairs) { g_counter.cls_pair_count += pairs; }
void count_macs(std::uint64_t macs) { g_counter.mac_count += macs; }

// ---- kernels ----------------------------------------------------------------

namespace {

bool any_traced(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->traced(); });
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[p * m + i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericInputError(std::string(op) + ": non-finite input");
  }
}

}  // namespace

// ---- operations -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not compatible");
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data());
  count_macs(static_cast<std::uint64_t>(m) * n * k);
  if (!any_traced({&a, &b})) return out;
  return record_op("matmul", std::move(out), {&a, &b},
                   [a = a.detached(), b = b.detached(), m, n, k](const Tensor& g, std::span<Tensor* const> gi) {
                     if (gi[0]) gemm_nt(m, k, n, g.data().data(), b.data().data(), gi[0]->data().data());
                     if (gi[1]) gemm_tn(k, n, m, a.data().data(), g.data().data(), gi[1]->data().data());
                   });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.extent(0), c = a.extent(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  if (!a.traced()) return out;
  return record_op("transpose", std::move(out), {&a}, [r, c](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[j * r + i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  if (!any_traced({&a, &b})) return out;
  return record_op("add", std::move(out), {&a, &b}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (Tensor* t : gi) {
      if (!t) continue;
      for (std::size_t i = 0; i < g.size(); ++i) (*t)[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  if (!any_traced({&a, &b})) return out;
  return record_op("sub", std::move(out), {&a, &b}, [](const Tensor& g, std::span<Tensor* const> gi) {
    if (gi[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
    if (gi[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  if (!any_traced({&a, &b})) return out;
  return record_op("mul", std::move(out), {&a, &b},
                   [a = a.detached(), b = b.detached()](const Tensor& g, std::span<Tensor* const> gi) {
                     if (gi[0])
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * b[i];
                     if (gi[1])
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * a[i];
                   });
}

Tensor scale(const Tensor& a, double factor) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  if (!a.traced()) return out;
  return record_op("scale", std::move(out), {&a}, [factor](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * factor;
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + value;
  if (!a.traced()) return out;
  return record_op("add_scalar", std::move(out), {&a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(bias, 1, "add_bias");
  if (x.rank() == 0 || x.shape().back() != bias.extent(0)) {
    throw DimensionError("add_bias: shapes " + shape_str(x.shape()) + " and " + shape_str(bias.shape()) +
                         " are not compatible");
  }
  const std::size_t n = bias.extent(0), rows = x.size() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + bias[j];
  if (!any_traced({&x, &bias})) return out;
  return record_op("add_bias", std::move(out), {&x, &bias},
                   [rows, n](const Tensor& g, std::span<Tensor* const> gi) {
                     if (gi[0])
                       for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                     if (gi[1])
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += g[r * n + j];
                   });
}

Tensor exp(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
  if (!a.traced()) return out;
  Tensor saved = out.detached();
  return record_op("exp", std::move(out), {&a}, [y = std::move(saved)](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * y[i];
  });
}

Tensor gelu(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * std::numbers::sqrt2 / 2.0));
  }
  if (!a.traced()) return out;
  return record_op("gelu", std::move(out), {&a}, [x = a.detached()](const Tensor& g, std::span<Tensor* const> gi) {
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      (*gi[0])[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (!a.traced()) return out;
  return record_op("sum", std::move(out), {&a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (double& v : gi[0]->data()) v += g[0];
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw IndexError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  }
  require_finite(x, "softmax");
  const auto& s = x.shape();
  const std::size_t len = s[axis];
  const std::size_t outer = shape_size(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = shape_size(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        out[base + j * inner] = std::exp(x[base + j * inner] - mx);
        z += out[base + j * inner];
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  if (!x.traced()) return out;
  Tensor saved = out.detached();
  return record_op("softmax", std::move(out), {&x},
                   [y = std::move(saved), outer, len, inner](const Tensor& g, std::span<Tensor* const> gi) {
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t in = 0; in < inner; ++in) {
                         const std::size_t base = o * len * inner + in;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * y[base + j * inner];
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t idx = base + j * inner;
                           (*gi[0])[idx] += y[idx] * (g[idx] - dot);
                         }
                       }
                     }
                   });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax: scalar input");
  require_finite(x, "log_softmax");
  const std::size_t len = x.shape().back(), rows = x.size() / len;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * len;
    const double mx = *std::max_element(xr, xr + len);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = xr[j] - lse;
  }
  if (!x.traced()) return out;
  Tensor saved = out.detached();
  return record_op("log_softmax", std::move(out), {&x},
                   [y = std::move(saved), rows, len](const Tensor& g, std::span<Tensor* const> gi) {
                     for (std::size_t r = 0; r < rows; ++r) {
                       double gsum = 0.0;
                       for (std::size_t j = 0; j < len; ++j) gsum += g[r * len + j];
                       for (std::size_t j = 0; j < len; ++j) {
                         const std::size_t idx = r * len + j;
                         (*gi[0])[idx] += g[idx] - std::exp(y[idx]) * gsum;
                       }
                     }
                   });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank(gain, 1, "layer_norm");
  require_rank(bias, 1, "layer_norm");
  if (x.rank() == 0 || x.shape().back() != gain.extent(0) || gain.shape() != bias.shape()) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " incompatible with gain " +
                         shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t d = gain.extent(0), rows = x.size() / d;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  if (!any_traced({&x, &gain, &bias})) return out;
  return record_op(
      "layer_norm", std::move(out), {&x, &gain, &bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), gain = gain.detached(), rows, d](
          const Tensor& g, std::span<Tensor* const> gi) {
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.data().data() + r * d;
          const double* xh = xhat.data().data() + r * d;
          if (gi[1])
            for (std::size_t j = 0; j < d; ++j) (*gi[1])[j] += gr[j] * xh[j];
          if (gi[2])
            for (std::size_t j = 0; j < d; ++j) (*gi[2])[j] += gr[j];
          if (!gi[0]) continue;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = gr[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            (*gi[0])[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  if (!a.traced()) return out;
  return record_op("reshape", std::move(out), {&a}, [](const Tensor& g, std::span<Tensor* const> gi) {
    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  if (x.rank() == 0) throw DimensionError("gather_rows: scalar input");
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t rows = x.extent(0), row = x.size() / rows;
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(indices[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  if (!x.traced()) return out;
  return record_op("gather_rows", std::move(out), {&x},
                   [idx = std::vector<std::size_t>(indices.begin(), indices.end()), row](
                       const Tensor& g, std::span<Tensor* const> gi) {
                     for (std::size_t i = 0; i < idx.size(); ++i)
                       for (std::size_t j = 0; j < row; ++j) (*gi[0])[idx[i] * row + j] += g[i * row + j];
                   });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() == 0 || begin >= end || end > x.extent(0)) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, idx);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw DimensionError("concat_rows: scalar input");
  shape[0] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
      throw DimensionError("concat_rows: " + shape_str(p.shape()) + " does not match " +
                           shape_str(parts[0].shape()));
    }
    shape[0] += p.extent(0);
  }
  Tensor out(shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  bool traced = false;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    offsets.push_back(off);
    off += p.size();
    traced = traced || p.traced();
  }
  if (!traced) return out;
  // Chain through a single node per part so arbitrary part counts fit the
  // fixed-arity recording interface.
  Tensor acc = out.detached();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!parts[i].traced()) continue;
    const std::size_t offset = offsets[i], n = parts[i].size();
    Tensor next = acc.detached();
    acc = record_op("concat_rows", std::move(next), {&acc, &parts[i]},
                    [offset, n](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0])
                        for (std::size_t j = 0; j < g.size(); ++j) (*gi[0])[j] += g[j];
                      for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += g[offset + j];
                    });
  }
  return acc;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.extent(0), cols = x.extent(1);
  if (begin >= end || end > cols) {
    throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = x[r * cols + begin + j];
  if (!x.traced()) return out;
  return record_op("slice_cols", std::move(out), {&x},
                   [rows, cols, begin, w](const Tensor& g, std::span<Tensor* const> gi) {
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < w; ++j) (*gi[0])[r * cols + begin + j] += g[r * w + j];
                   });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].extent(0) : 0;
  std::size_t cols = 0;
  bool traced = false;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.extent(0) != rows) {
      throw DimensionError("concat_cols: " + shape_str(p.shape()) + " does not match " +
                           shape_str(parts[0].shape()));
    }
    cols += p.extent(1);
    traced = traced || p.traced();
  }
  Tensor out({rows, cols});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.extent(1);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) out[r * cols + off + j] = p[r * w + j];
    offsets.push_back(off);
    off += w;
  }
  if (!traced) return out;
  Tensor acc = out.detached();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!parts[i].traced()) continue;
    const std::size_t offset = offsets[i], w = parts[i].extent(1);
    Tensor next = acc.detached();
    acc = record_op("concat_cols", std::move(next), {&acc, &parts[i]},
                    [rows, cols, offset, w](const Tensor& g, std::span<Tensor* const> gi) {
                      if (gi[0])
                        for (std::size_t j = 0; j < g.size(); ++j) (*gi[0])[j] += g[j];
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < w; ++j) (*gi[1])[r * w + j] += g[r * cols + offset + j];
                    });
  }
  return acc;
}

Tensor mean_groups(const Tensor& x, std::size_t group) {
  require_rank(x, 2, "mean_groups");
  const std::size_t rows = x.extent(0), d = x.extent(1);
  if (group == 0 || rows % group != 0) {
    throw DimensionError("mean_groups: group " + std::to_string(group) + " does not divide " +
                         shape_str(x.shape()));
  }
  const std::size_t n = rows / group;
  const double inv = 1.0 / static_cast<double>(group);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < group; ++r)
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += x[(i * group + r) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= inv;
  }
  if (!x.traced()) return out;
  return record_op("mean_groups", std::move(out), {&x},
                   [n, group, d, inv](const Tensor& g, std::span<Tensor* const> gi) {
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t r = 0; r < group; ++r)
                         for (std::size_t j = 0; j < d; ++j) (*gi[0])[(i * group + r) * d + j] += g[i * d + j] * inv;
                   });
}

Tensor grouped_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t groups,
                         std::size_t heads) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_same_shape(k, v, "attention");
  const std::size_t nq = q.extent(0), nk = k.extent(0), d = q.extent(1);
  if (k.extent(1) != d) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + " and key " + shape_str(k.shape()) +
                         " widths differ");
  }
  if (groups == 0 || nq % groups || nk % groups) {
    throw DimensionError("attention: " + std::to_string(groups) + " groups do not divide " +
                         std::to_string(nq) + " queries and " + std::to_string(nk) + " keys");
  }
  if (heads == 0 || d % heads) {
    throw DimensionError("attention: " + std::to_string(heads) + " heads do not divide width " +
                         std::to_string(d));
  }
  const std::size_t qg = nq / groups, kg = nk / groups, dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out({nq, d});
  // probs[g][h] is a qg x kg row-stochastic matrix.
  std::vector<double> probs(groups * heads * qg * kg);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (g * heads + h) * qg * kg;
      for (std::size_t i = 0; i < qg; ++i) {
        const double* qi = q.data().data() + (g * qg + i) * d + h * dh;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < kg; ++j) {
          const double* kj = k.data().data() + (g * kg + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * kg + j] = s * sc;
          mx = std::max(mx, p[i * kg + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < kg; ++j) {
          p[i * kg + j] = std::exp(p[i * kg + j] - mx);
          z += p[i * kg + j];
        }
        double* oi = out.data().data() + (g * qg + i) * d + h * dh;
        for (std::size_t j = 0; j < kg; ++j) {
          p[i * kg + j] /= z;
          const double* vj = v.data().data() + (g * kg + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * kg + j] * vj[c];
        }
      }
    }
  }
  count_pairs(static_cast<std::uint64_t>(groups) * qg * kg);
  count_macs(2 * static_cast<std::uint64_t>(groups) * qg * kg * d);
  if (!any_traced({&q, &k, &v})) return out;

  return record_op(
      "attention", std::move(out), {&q, &k, &v},
      [q = q.detached(), k = k.detached(), v = v.detached(), probs = std::move(probs), groups, heads, qg, kg, d, dh,
       sc](const Tensor& gout, std::span<Tensor* const> gi) {
        std::vector<double> ds(qg * kg);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (g * heads + h) * qg * kg;
            for (std::size_t i = 0; i < qg; ++i) {
              const double* go = gout.data().data() + (g * qg + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < kg; ++j) {
                const double* vj = v.data().data() + (g * kg + j) * d + h * dh;
                double dp = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dp += go[c] * vj[c];
                ds[i * kg + j] = dp;
                dot += dp * p[i * kg + j];
                if (gi[2]) {
                  double* dv = gi[2]->data().data() + (g * kg + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dv[c] += p[i * kg + j] * go[c];
                }
              }
              for (std::size_t j = 0; j < kg; ++j) ds[i * kg + j] = p[i * kg + j] * (ds[i * kg + j] - dot) * sc;
            }
            for (std::size_t i = 0; i < qg; ++i) {
              const double* qi = q.data().data() + (g * qg + i) * d + h * dh;
              double* dq = gi[0] ? gi[0]->data().data() + (g * qg + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < kg; ++j) {
                const double s = ds[i * kg + j];
                const double* kj = k.data().data() + (g * kg + j) * d + h * dh;
                if (dq)
                  for (std::size_t c = 0; c < dh; ++c) dq[c] += s * kj[c];
                if (gi[1]) {
                  double* dk = gi[1]->data().data() + (g * kg + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dk[c] += s * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace logo
