#pragma once

#include <cstddef>
#include <random>
#include <utility>

#include "logo/tensor.hpp"

namespace logo {

// Backbone features for one clip, [F x H x W x C].
struct ClipFeatures {
  Tensor features;

  std::size_t frames() const { return features.extent(0); }
  std::size_t height() const { return features.extent(1); }
  std::size_t width() const { return features.extent(2); }
  std::size_t channels() const { return features.extent(3); }

  static ClipFeatures from(Tensor features);
};

struct EmbedParams {
  Tensor proj_weight;  // [C x d]
  Tensor proj_bias;    // [d]
  Tensor spatial_pe;   // [(H*W) x d]
  Tensor temporal_pe;  // [F x d]
  Tensor cls_token;    // [d]
  Tensor cls_pe;       // [d]

  std::size_t width() const { return proj_weight.extent(1); }

  static EmbedParams init(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                          std::size_t dim, std::mt19937_64& rng);
};

struct Geometry {
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t dim = 0;

  std::size_t spatial() const { return height * width; }
  std::size_t grid_tokens() const { return frames * height * width; }

  friend bool operator==(const Geometry&, const Geometry&) = default;
};

// Clip token sequence: row 0 is CLS, followed by the F*H*W grid tokens in
// frame-major, then row-major spatial order.
struct TokenGrid {
  Tensor tokens;  // [(F*H*W + 1) x d]
  Geometry geometry;

  static TokenGrid from(Tensor tokens, Geometry geometry);

  std::size_t flat_index(std::size_t frame, std::size_t spatial) const {
    return 1 + frame * geometry.spatial() + spatial;
  }
  // Inverse of flat_index for non-CLS rows.
  std::pair<std::size_t, std::size_t> position(std::size_t flat) const;

  Tensor cls() const;   // [1 x d]
  Tensor grid() const;  // [(F*H*W) x d]
};

// Shared per-location affine map (a 1x1 convolution). Output is [F x (H*W) x d].
Tensor project(const ClipFeatures& clip, const EmbedParams& params);

// Adds spatial and temporal positional embeddings and prepends the CLS token.
// height * width must equal the spatial extent of `projected`.
TokenGrid assemble(const Tensor& projected, const EmbedParams& params, std::size_t height, std::size_t width);

// assemble(project(clip)).
TokenGrid embed(const ClipFeatures& clip, const EmbedParams& params);

}  // namespace logo
