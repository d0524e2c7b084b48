#include "logo/attention.hpp"

#include <cmath>
#include <limits>

#include "logo/random.hpp"

namespace logo {

void WindowSpec::validate(std::size_t frames, std::size_t height, std::size_t width) const {
  auto check = [](const char* axis, std::size_t window, const char* name, std::size_t extent) {
    if (window == 0 || extent % window != 0) {
      throw WindowSpecError("window extent " + std::string(axis) + "=" + std::to_string(window) +
                            " does not divide " + name + "=" + std::to_string(extent));
    }
  };
  check("f", f, "F", frames);
  check("h", h, "H", height);
  check("w", w, "W", width);
}

std::size_t WindowSpec::window_count(const Geometry& g) const {
  validate(g);
  return (g.frames / f) * (g.height / h) * (g.width / w);
}

std::string to_string(PoolMode mode) { return mode == PoolMode::average ? "average" : "learned"; }

PoolMode parse_pool_mode(const std::string& text) {
  if (text == "average") return PoolMode::average;
  if (text == "learned") return PoolMode::learned;
  throw ConfigError("unknown pool mode '" + text + "' (expected average or learned)");
}

AttentionParams AttentionParams::init(std::size_t dim, std::size_t heads, std::mt19937_64& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("width d=" + std::to_string(dim) + " is not divisible by heads=" + std::to_string(heads));
  }
  const std::size_t dh = dim / heads;
  AttentionParams p;
  for (std::size_t i = 0; i < heads; ++i) p.wq.push_back(fan_in_uniform({dim, dh}, dim, rng));
  for (std::size_t i = 0; i < heads; ++i) p.wk.push_back(fan_in_uniform({dim, dh}, dim, rng));
  for (std::size_t i = 0; i < heads; ++i) p.wv.push_back(fan_in_uniform({dim, dh}, dim, rng));
  p.wo = fan_in_uniform({dim, dim}, dim, rng);
  p.ln_gain = Tensor::filled({dim}, 1.0);
  p.ln_bias = Tensor({dim});
  return p;
}

PoolParams PoolParams::init(PoolMode mode, std::size_t window_volume, std::size_t dim, std::mt19937_64& rng) {
  PoolParams p;
  p.mode = mode;
  if (mode == PoolMode::learned) {
    p.weight = fan_in_uniform({window_volume * dim, dim}, window_volume * dim, rng);
    p.bias = Tensor({dim});
  }
  return p;
}

MlpParams MlpParams::init(std::size_t dim, std::mt19937_64& rng) {
  MlpParams p;
  p.ln_gain = Tensor::filled({dim}, 1.0);
  p.ln_bias = Tensor({dim});
  p.w1 = fan_in_uniform({dim, 4 * dim}, dim, rng);
  p.b1 = Tensor({4 * dim});
  p.w2 = fan_in_uniform({4 * dim, dim}, 4 * dim, rng);
  p.b2 = Tensor({dim});
  return p;
}

BlockParams BlockParams::init(std::size_t dim, std::size_t heads, const WindowSpec& window, PoolMode mode,
                              std::mt19937_64& rng) {
  BlockParams p;
  p.local = AttentionParams::init(dim, heads, rng);
  p.global = AttentionParams::init(dim, heads, rng);
  p.pool = PoolParams::init(mode, window.volume(), dim, rng);
  p.mlp = MlpParams::init(dim, rng);
  return p;
}

std::vector<std::size_t> window_order(const Geometry& g, const WindowSpec& spec) {
  spec.validate(g);
  std::vector<std::size_t> order;
  order.reserve(g.grid_tokens());
  for (std::size_t t0 = 0; t0 < g.frames; t0 += spec.f)
    for (std::size_t y0 = 0; y0 < g.height; y0 += spec.h)
      for (std::size_t x0 = 0; x0 < g.width; x0 += spec.w)
        for (std::size_t t = t0; t < t0 + spec.f; ++t)
          for (std::size_t y = y0; y < y0 + spec.h; ++y)
            for (std::size_t x = x0; x < x0 + spec.w; ++x) order.push_back(t * g.spatial() + y * g.width + x);
  return order;
}

namespace {

std::vector<std::size_t> inverse(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

Tensor heads_matrix(const std::vector<Tensor>& per_head) { return concat_cols(per_head); }

void check_heads(const AttentionParams& p, std::size_t dim) {
  if (p.heads() == 0 || p.wk.size() != p.heads() || p.wv.size() != p.heads()) {
    throw DimensionError("attention parameters need the same non-zero head count for Q, K and V");
  }
  if (p.heads() * p.wq[0].extent(1) != dim) {
    throw DimensionError("head widths do not add up to token width " + std::to_string(dim));
  }
}

TokenGrid with_grid(const TokenGrid& x, const Tensor& cls, const Tensor& grid) {
  const Tensor parts[] = {cls, grid};
  return TokenGrid{concat_rows(parts), x.geometry};
}

}  // namespace

WindowBlocks partition(const TokenGrid& grid, const WindowSpec& spec) {
  const auto order = window_order(grid.geometry, spec);
  const std::size_t vol = spec.volume();
  Tensor body = grid.grid();
  WindowBlocks out{grid.cls(), {}, grid.geometry, spec};
  for (std::size_t start = 0; start < order.size(); start += vol) {
    out.blocks.push_back(gather_rows(body, std::span(order).subspan(start, vol)));
  }
  return out;
}

TokenGrid merge(const WindowBlocks& windows) {
  const auto order = window_order(windows.geometry, windows.spec);
  if (windows.blocks.size() * windows.spec.volume() != order.size()) {
    throw DimensionError("merge: " + std::to_string(windows.blocks.size()) + " blocks do not cover the grid");
  }
  Tensor stacked = concat_rows(windows.blocks);
  return with_grid(TokenGrid{Tensor(), windows.geometry}, windows.cls, gather_rows(stacked, inverse(order)));
}

TokenGrid mhla(const TokenGrid& x, const BlockParams& params, const WindowSpec& spec) {
  const auto& p = params.local;
  const Geometry& g = x.geometry;
  check_heads(p, g.dim);
  const auto order = window_order(g, spec);
  const std::size_t windows = order.size() / spec.volume();

  Tensor body = x.grid();
  Tensor normed = gather_rows(layer_norm(body, p.ln_gain, p.ln_bias, kLayerNormEps), order);
  Tensor q = matmul(normed, heads_matrix(p.wq));
  Tensor k = matmul(normed, heads_matrix(p.wk));
  Tensor v = matmul(normed, heads_matrix(p.wv));
  Tensor attended = matmul(grouped_attention(q, k, v, windows, p.heads()), p.wo);
  Tensor updated = add(body, gather_rows(attended, inverse(order)));
  return with_grid(x, x.cls(), updated);
}

Tensor window_pool(const TokenGrid& y, const WindowSpec& spec, const PoolParams& pool) {
  const Geometry& g = y.geometry;
  const auto order = window_order(g, spec);
  const std::size_t vol = spec.volume(), windows = order.size() / vol;
  Tensor grouped = gather_rows(y.grid(), order);
  if (pool.mode == PoolMode::average) return mean_groups(grouped, vol);
  if (pool.weight.shape() != Shape{vol * g.dim, g.dim} || pool.bias.shape() != Shape{g.dim}) {
    throw DimensionError("learned pooling weight " + shape_str(pool.weight.shape()) + " does not match window of " +
                         std::to_string(vol) + " tokens of width " + std::to_string(g.dim));
  }
  return add_bias(matmul(reshape(grouped, {windows, vol * g.dim}), pool.weight), pool.bias);
}

TokenGrid global_attention(const TokenGrid& y, const BlockParams& params, const WindowSpec& spec) {
  const auto& p = params.global;
  const Geometry& g = y.geometry;
  check_heads(p, g.dim);

  Tensor pooled = window_pool(y, spec, params.pool);
  const std::size_t windows = pooled.extent(0);
  const Tensor kv_parts[] = {pooled, y.cls()};
  Tensor kv_src = layer_norm(concat_rows(kv_parts), p.ln_gain, p.ln_bias, kLayerNormEps);

  Tensor q = matmul(layer_norm(y.tokens, p.ln_gain, p.ln_bias, kLayerNormEps), heads_matrix(p.wq));
  Tensor k = matmul(kv_src, heads_matrix(p.wk));
  Tensor v = matmul(kv_src, heads_matrix(p.wv));
  Tensor attended = matmul(grouped_attention(q, k, v, 1, p.heads()), p.wo);

  // (n+1)(P+1) pairs were counted; everything beyond n*P involves CLS.
  const std::uint64_t n = g.grid_tokens();
  count_cls_pairs(n + windows + 1);
  return TokenGrid{add(y.tokens, attended), g};
}

TokenGrid mlp_residual(const TokenGrid& z, const MlpParams& mlp) {
  Tensor hidden = layer_norm(z.tokens, mlp.ln_gain, mlp.ln_bias, kLayerNormEps);
  hidden = gelu(add_bias(matmul(hidden, mlp.w1), mlp.b1));
  hidden = add_bias(matmul(hidden, mlp.w2), mlp.b2);
  return TokenGrid{add(z.tokens, hidden), z.geometry};
}

TokenGrid mhga(const TokenGrid& y, const BlockParams& params, const WindowSpec& spec) {
  return mlp_residual(global_attention(y, params, spec), params.mlp);
}

TokenGrid logo_block(const TokenGrid& x, const BlockParams& params, const WindowSpec& spec) {
  return mhga(mhla(x, params, spec), params, spec);
}

TokenGrid full_space_time_attention(const TokenGrid& x, const AttentionParams& p, bool include_cls) {
  check_heads(p, x.geometry.dim);
  Tensor src = include_cls ? x.tokens : x.grid();
  const std::size_t n = src.extent(0);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(p.wq[0].extent(1)));

  Tensor normed = layer_norm(src, p.ln_gain, p.ln_bias, kLayerNormEps);
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < p.heads(); ++h) {
    Tensor q = matmul(normed, p.wq[h]);
    Tensor k = matmul(normed, p.wk[h]);
    Tensor v = matmul(normed, p.wv[h]);
    Tensor weights = softmax(scale(matmul(q, transpose(k)), inv_scale), 1);
    heads.push_back(matmul(weights, v));
  }
  Tensor out = add(src, matmul(concat_cols(heads), p.wo));

  const std::uint64_t grid_n = x.geometry.grid_tokens();
  count_pairs(static_cast<std::uint64_t>(n) * n);
  if (include_cls) {
    count_cls_pairs(2 * grid_n + 1);
    return TokenGrid{out, x.geometry};
  }
  return with_grid(x, x.cls(), out);
}

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t r = 0;
  if (__builtin_mul_overflow(a, b, &r)) throw ContractError("cost arithmetic overflows 64 bits");
  return r;
}

}  // namespace

CostReport cost_report(std::size_t F, std::size_t H, std::size_t W, std::size_t f, std::size_t h, std::size_t w) {
  if (F == 0 || H == 0 || W == 0) throw WindowSpecError("clip extents must be positive");
  WindowSpec{f, h, w}.validate(F, H, W);
  CostReport r{F, H, W, f, h, w};
  const std::uint64_t S = checked_mul(H, W);
  const std::uint64_t n = checked_mul(F, S);
  const std::uint64_t vol = checked_mul(checked_mul(f, h), w);
  r.cost_local = checked_mul(n, vol);
  r.cost_global = checked_mul(n, n) / vol;
  r.cost_logo_total = r.cost_local + r.cost_global;
  r.cost_full = checked_mul(n, n);
  r.cost_spatial_only = checked_mul(F, checked_mul(S, S));
  r.cost_divided = r.cost_spatial_only + checked_mul(checked_mul(F, F), S);
  r.cost_mixing = r.cost_spatial_only;
  return r;
}

}  // namespace logo
