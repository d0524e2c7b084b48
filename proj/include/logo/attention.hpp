#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "logo/embedding.hpp"
#include "logo/tensor.hpp"

namespace logo {

inline constexpr double kLayerNormEps = 1e-6;

// Local window extents: f frames by h x w spatial positions.
struct WindowSpec {
  std::size_t f = 2;
  std::size_t h = 2;
  std::size_t w = 2;

  std::size_t volume() const { return f * h * w; }

  // Throws WindowSpecError naming the first axis that is not tiled evenly.
  void validate(std::size_t frames, std::size_t height, std::size_t width) const;
  void validate(const Geometry& g) const { validate(g.frames, g.height, g.width); }
  std::size_t window_count(const Geometry& g) const;

  friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

enum class PoolMode { average, learned };

std::string to_string(PoolMode mode);
PoolMode parse_pool_mode(const std::string& text);

// Multi-head self-attention weights with the pre-attention layer norm.
struct AttentionParams {
  std::vector<Tensor> wq;  // per head, [d x D_h]
  std::vector<Tensor> wk;
  std::vector<Tensor> wv;
  Tensor wo;  // [d x d]
  Tensor ln_gain;
  Tensor ln_bias;

  std::size_t heads() const { return wq.size(); }

  static AttentionParams init(std::size_t dim, std::size_t heads, std::mt19937_64& rng);
};

struct PoolParams {
  PoolMode mode = PoolMode::average;
  Tensor weight;  // learned mode only, [(f*h*w*d) x d]
  Tensor bias;    // learned mode only, [d]

  static PoolParams init(PoolMode mode, std::size_t window_volume, std::size_t dim, std::mt19937_64& rng);
};

struct MlpParams {
  Tensor ln_gain;
  Tensor ln_bias;
  Tensor w1;  // [d x 4d]
  Tensor b1;
  Tensor w2;  // [4d x d]
  Tensor b2;

  static MlpParams init(std::size_t dim, std::mt19937_64& rng);
};

struct BlockParams {
  AttentionParams local;
  AttentionParams global;
  PoolParams pool;
  MlpParams mlp;

  static BlockParams init(std::size_t dim, std::size_t heads, const WindowSpec& window, PoolMode mode,
                          std::mt19937_64& rng);
};

// Grid-token row indices (0-based, CLS excluded) listed window by window.
// Windows are ordered frame-block major, then spatial blocks row-major; inside
// a window tokens run frame, row, column.
std::vector<std::size_t> window_order(const Geometry& geometry, const WindowSpec& spec);

struct WindowBlocks {
  Tensor cls;                  // [1 x d]
  std::vector<Tensor> blocks;  // each [(f*h*w) x d]
  Geometry geometry;
  WindowSpec spec;
};

WindowBlocks partition(const TokenGrid& grid, const WindowSpec& spec);
TokenGrid merge(const WindowBlocks& windows);

// Y = X + MSA(LN(X)) inside each window; CLS passes through unchanged.
TokenGrid mhla(const TokenGrid& x, const BlockParams& params, const WindowSpec& spec);

// One token per window, [(window count) x d]; CLS is not pooled.
Tensor window_pool(const TokenGrid& y, const WindowSpec& spec, const PoolParams& pool);

// Z = Y + softmax(Q K^T / sqrt(D_h)) V with queries from every token and
// keys/values from the pooled windows plus the CLS token.
TokenGrid global_attention(const TokenGrid& y, const BlockParams& params, const WindowSpec& spec);

// Z + MLP(LN(Z)).
TokenGrid mlp_residual(const TokenGrid& z, const MlpParams& mlp);

// Global attention followed by the MLP residual.
TokenGrid mhga(const TokenGrid& y, const BlockParams& params, const WindowSpec& spec);

// One full local-global block: mhga(mhla(x)).
TokenGrid logo_block(const TokenGrid& x, const BlockParams& params, const WindowSpec& spec);

// X + MSA(LN(X)) with every grid token attending to every grid token. With
// include_cls the CLS token joins as query and key; otherwise it passes
// through. Built from primitive tensor operations as a reference.
TokenGrid full_space_time_attention(const TokenGrid& x, const AttentionParams& params, bool include_cls = false);

// Closed-form (query, key) pair counts per attention scheme.
struct CostReport {
  std::size_t F = 0, H = 0, W = 0, f = 0, h = 0, w = 0;
  std::uint64_t cost_local = 0;
  std::uint64_t cost_global = 0;
  std::uint64_t cost_logo_total = 0;
  std::uint64_t cost_full = 0;
  std::uint64_t cost_spatial_only = 0;
  std::uint64_t cost_divided = 0;
  std::uint64_t cost_mixing = 0;

  // cost_logo_total < cost_divided < cost_full
  bool ordering_ok() const { return cost_logo_total < cost_divided && cost_divided < cost_full; }
};

CostReport cost_report(std::size_t F, std::size_t H, std::size_t W, std::size_t f, std::size_t h, std::size_t w);

}  // namespace logo
