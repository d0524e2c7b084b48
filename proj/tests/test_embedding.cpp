#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "support.hpp"

using namespace logo;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

EmbedParams zero_params(std::size_t F, std::size_t H, std::size_t W, std::size_t C, std::size_t d) {
  return EmbedParams{Tensor({C, d}), Tensor({d}), Tensor({H * W, d}), Tensor({F, d}), Tensor({d}), Tensor({d})};
}

EmbedParams random_params(std::size_t F, std::size_t H, std::size_t W, std::size_t C, std::size_t d,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return EmbedParams::init(F, H, W, C, d, rng);
}

}  // namespace

TEST_CASE("ClipFeatures requires a rank-4 tensor") {
  CHECK_THROWS_AS(ClipFeatures::from(Tensor({2, 3, 4})), DimensionError);
  const auto clip = ClipFeatures::from(Tensor({2, 3, 4, 5}));
  CHECK(clip.frames() == 2);
  CHECK(clip.height() == 3);
  CHECK(clip.width() == 4);
  CHECK(clip.channels() == 5);
}

TEST_CASE("project: identity and constant maps") {
  std::mt19937_64 rng(1);
  const std::size_t F = 2, H = 2, W = 3, C = 4;
  const auto clip = ClipFeatures::from(random_tensor({F, H, W, C}, rng));

  EmbedParams p = zero_params(F, H, W, C, C);
  for (std::size_t i = 0; i < C; ++i) p.proj_weight[i * C + i] = 1.0;
  const Tensor out = project(clip, p);
  CHECK(out.shape() == Shape{F, H * W, C});
  CHECK(max_abs_diff(reshape(out, clip.features.shape()), clip.features) == 0.0);

  EmbedParams q = zero_params(F, H, W, C, 3);
  q.proj_bias = Tensor::vector({0.5, -1.0, 2.0});
  const Tensor constant = project(clip, q);
  for (std::size_t i = 0; i < constant.size(); ++i) CHECK(constant[i] == q.proj_bias[i % 3]);
}

TEST_CASE("project matches a per-location matrix-vector product") {
  std::mt19937_64 rng(2);
  const std::size_t F = 3, H = 2, W = 2, C = 5, d = 7;
  const auto clip = ClipFeatures::from(random_tensor({F, H, W, C}, rng));
  EmbedParams p = zero_params(F, H, W, C, d);
  p.proj_weight = random_tensor({C, d}, rng);
  p.proj_bias = random_tensor({d}, rng);
  const Tensor out = project(clip, p);
  for (std::size_t t = 0; t < F; ++t)
    for (std::size_t s = 0; s < H * W; ++s)
      for (std::size_t j = 0; j < d; ++j) {
        double acc = p.proj_bias[j];
        for (std::size_t c = 0; c < C; ++c) acc += clip.features[(t * H * W + s) * C + c] * p.proj_weight.at(c, j);
        CHECK(std::abs(out[(t * H * W + s) * d + j] - acc) < 1e-12);
      }
}

TEST_CASE("project rejects a channel mismatch") {
  const EmbedParams p = zero_params(2, 2, 2, 4, 8);
  CHECK_THROWS_AS(project(ClipFeatures::from(Tensor({2, 2, 2, 5})), p), DimensionError);
}

TEST_CASE("assemble: zero embeddings keep projected values") {
  std::mt19937_64 rng(3);
  const std::size_t F = 2, H = 2, W = 2, d = 4;
  const Tensor projected = random_tensor({F, H * W, d}, rng);
  const TokenGrid grid = assemble(projected, zero_params(F, H, W, 3, d), H, W);
  CHECK(grid.tokens.shape() == Shape{F * H * W + 1, d});
  for (std::size_t j = 0; j < d; ++j) CHECK(grid.tokens[j] == 0.0);
  CHECK(max_abs_diff(grid.grid(), reshape(projected, {F * H * W, d})) == 0.0);
}

TEST_CASE("assemble: pure positional signal and CLS row") {
  const std::size_t F = 3, H = 2, W = 2, d = 5;
  const EmbedParams p = random_params(F, H, W, 4, d, 4);
  const TokenGrid grid = assemble(Tensor({F, H * W, d}), p, H, W);
  for (std::size_t t = 0; t < F; ++t)
    for (std::size_t s = 0; s < H * W; ++s)
      for (std::size_t j = 0; j < d; ++j) {
        CHECK(grid.tokens.at(grid.flat_index(t, s), j) == p.spatial_pe.at(s, j) + p.temporal_pe.at(t, j));
      }
  for (std::size_t j = 0; j < d; ++j) CHECK(grid.tokens.at(0, j) == p.cls_token[j] + p.cls_pe[j]);
}

TEST_CASE("assemble: F=2, H=W=1 token layout") {
  const std::size_t d = 2;
  EmbedParams p = zero_params(2, 1, 1, 1, d);
  p.cls_token = Tensor::vector({9, 9});
  const Tensor projected({2, 1, d}, {1, 1, 2, 2});
  const TokenGrid grid = assemble(projected, p, 1, 1);
  CHECK(grid.tokens.extent(0) == 3);
  CHECK(grid.tokens.at(0, 0) == 9.0);
  CHECK(grid.tokens.at(1, 0) == 1.0);
  CHECK(grid.tokens.at(2, 0) == 2.0);
}

TEST_CASE("assemble rejects geometry mismatches") {
  const EmbedParams p = zero_params(2, 2, 2, 3, 4);
  CHECK_THROWS_AS(assemble(Tensor({2, 3, 4}), p, 1, 3), DimensionError);
  CHECK_THROWS_AS(assemble(Tensor({2, 4, 4}), p, 1, 3), DimensionError);
  CHECK_THROWS_AS(assemble(Tensor({3, 4, 4}), p, 2, 2), DimensionError);
  CHECK_THROWS_AS(assemble(Tensor({2, 4, 5}), p, 2, 2), DimensionError);
}

TEST_CASE("flat index and position are inverse bijections") {
  const Geometry g{3, 2, 4, 1};
  const TokenGrid grid = TokenGrid::from(Tensor({g.grid_tokens() + 1, 1}), g);
  std::set<std::size_t> seen;
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t s = 0; s < g.spatial(); ++s) {
      const std::size_t flat = grid.flat_index(t, s);
      CHECK(flat == 1 + t * g.spatial() + s);
      CHECK(seen.insert(flat).second);
      CHECK(grid.position(flat) == std::pair{t, s});
    }
  CHECK(seen.size() == g.grid_tokens());
  CHECK_THROWS_AS(grid.position(0), IndexError);
}

TEST_CASE("frame permutation commutes with embedding when positional tables are zero") {
  std::mt19937_64 rng(5);
  const std::size_t F = 4, H = 2, W = 2, C = 3, d = 6;
  EmbedParams p = random_params(F, H, W, C, d, 6);
  p.spatial_pe = Tensor({H * W, d});
  p.temporal_pe = Tensor({F, d});
  const Tensor x = random_tensor({F, H, W, C}, rng);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  const std::size_t frame_size = H * W * C;
  Tensor permuted(x.shape());
  for (std::size_t t = 0; t < F; ++t)
    for (std::size_t i = 0; i < frame_size; ++i) permuted[t * frame_size + i] = x[perm[t] * frame_size + i];

  const TokenGrid a = embed(ClipFeatures::from(x), p);
  const TokenGrid b = embed(ClipFeatures::from(permuted), p);
  CHECK(max_abs_diff(a.cls(), b.cls()) == 0.0);
  for (std::size_t t = 0; t < F; ++t)
    for (std::size_t s = 0; s < H * W; ++s)
      for (std::size_t j = 0; j < d; ++j)
        CHECK(b.tokens.at(b.flat_index(t, s), j) == a.tokens.at(a.flat_index(perm[t], s), j));
}

TEST_CASE("token width follows d, not the channel count") {
  std::mt19937_64 rng(7);
  for (std::size_t C : {1, 3, 17}) {
    const EmbedParams p = random_params(2, 2, 2, C, 8, C);
    CHECK(embed(ClipFeatures::from(random_tensor({2, 2, 2, C}, rng)), p).tokens.extent(1) == 8);
  }
}

TEST_CASE("initial parameter shapes and scales") {
  const EmbedParams p = random_params(8, 4, 4, 16, 64, 8);
  CHECK(p.proj_weight.shape() == Shape{16, 64});
  CHECK(p.proj_bias.shape() == Shape{64});
  CHECK(p.spatial_pe.shape() == Shape{16, 64});
  CHECK(p.temporal_pe.shape() == Shape{8, 64});
  CHECK(p.cls_token.shape() == Shape{64});
  CHECK(p.cls_pe.shape() == Shape{64});
  for (double b : p.proj_bias.data()) CHECK(b == 0.0);
  double sq = 0.0;
  for (double v : p.spatial_pe.data()) sq += v * v;
  CHECK(std::sqrt(sq / p.spatial_pe.size()) == doctest::Approx(0.02).epsilon(0.1));
  const double bound = 1.0 / std::sqrt(16.0);
  for (double w : p.proj_weight.data()) CHECK(std::abs(w) <= bound);
}
