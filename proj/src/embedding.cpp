#include "logo/embedding.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include "logo/random.hpp"

namespace logo {

ClipFeatures ClipFeatures::from(Tensor features) {
  if (features.rank() != 4) {
    throw DimensionError("clip features must be [F x H x W x C], got " + shape_str(features.shape()));
  }
  return ClipFeatures{std::move(features)};
}

EmbedParams EmbedParams::init(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                              std::size_t dim, std::mt19937_64& rng) {
  EmbedParams p;
  p.proj_weight = fan_in_uniform({channels, dim}, channels, rng);
  p.proj_bias = Tensor({dim});
  p.spatial_pe = normal_tensor({height * width, dim}, 0.02, rng);
  p.temporal_pe = normal_tensor({frames, dim}, 0.02, rng);
  p.cls_token = normal_tensor({dim}, 0.02, rng);
  p.cls_pe = normal_tensor({dim}, 0.02, rng);
  return p;
}

TokenGrid TokenGrid::from(Tensor tokens, Geometry geometry) {
  if (tokens.rank() != 2 || tokens.extent(0) != geometry.grid_tokens() + 1 || tokens.extent(1) != geometry.dim) {
    throw DimensionError("token grid " + shape_str(tokens.shape()) + " does not match geometry F=" +
                         std::to_string(geometry.frames) + " H=" + std::to_string(geometry.height) +
                         " W=" + std::to_string(geometry.width) + " d=" + std::to_string(geometry.dim));
  }
  return TokenGrid{std::move(tokens), geometry};
}

std::pair<std::size_t, std::size_t> TokenGrid::position(std::size_t flat) const {
  if (flat == 0 || flat > geometry.grid_tokens()) {
    throw IndexError("flat index " + std::to_string(flat) + " is not a grid token");
  }
  return {(flat - 1) / geometry.spatial(), (flat - 1) % geometry.spatial()};
}

Tensor TokenGrid::cls() const { return slice_rows(tokens, 0, 1); }

Tensor TokenGrid::grid() const { return slice_rows(tokens, 1, tokens.extent(0)); }

Tensor project(const ClipFeatures& clip, const EmbedParams& params) {
  const std::size_t frames = clip.frames(), spatial = clip.height() * clip.width(), channels = clip.channels();
  if (params.proj_weight.rank() != 2 || params.proj_weight.extent(0) != channels) {
    throw DimensionError("projection expects " + std::to_string(params.proj_weight.extent(0)) +
                         " channels, clip has " + std::to_string(channels));
  }
  const std::size_t dim = params.width();
  Tensor flat = reshape(clip.features, {frames * spatial, channels});
  Tensor out = add_bias(matmul(flat, params.proj_weight), params.proj_bias);
  return reshape(out, {frames, spatial, dim});
}

TokenGrid assemble(const Tensor& projected, const EmbedParams& params, std::size_t height, std::size_t width) {
  if (projected.rank() != 3) {
    throw DimensionError("assemble expects [F x HW x d], got " + shape_str(projected.shape()));
  }
  const std::size_t frames = projected.extent(0), spatial = projected.extent(1), dim = projected.extent(2);
  if (params.spatial_pe.shape() != Shape{spatial, dim} || params.temporal_pe.shape() != Shape{frames, dim} ||
      params.cls_token.shape() != Shape{dim} || params.cls_pe.shape() != Shape{dim}) {
    throw DimensionError("positional embeddings " + shape_str(params.spatial_pe.shape()) + " / " +
                         shape_str(params.temporal_pe.shape()) + " do not match projected tokens " +
                         shape_str(projected.shape()));
  }
  if (height * width != spatial) {
    throw DimensionError("spatial extent " + std::to_string(spatial) + " is not " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  const std::size_t n = frames * spatial;
  std::vector<std::size_t> spatial_idx(n), temporal_idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    spatial_idx[i] = i % spatial;
    temporal_idx[i] = i / spatial;
  }
  Tensor grid = reshape(projected, {n, dim});
  grid = add(grid, gather_rows(params.spatial_pe, spatial_idx));
  grid = add(grid, gather_rows(params.temporal_pe, temporal_idx));
  Tensor cls = reshape(add(params.cls_token, params.cls_pe), {1, dim});
  const Tensor parts[] = {cls, grid};
  return TokenGrid{concat_rows(parts), Geometry{frames, height, width, dim}};
}

TokenGrid embed(const ClipFeatures& clip, const EmbedParams& params) {
  return assemble(project(clip, params), params, clip.height(), clip.width());
}

}  // namespace logo
