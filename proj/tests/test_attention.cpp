#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <numeric>
#include <set>

#include "doctest.h"
#include "support.hpp"

using namespace logo;
using testing::gradcheck_inputs;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

TokenGrid random_grid(const Geometry& g, std::mt19937_64& rng) {
  return TokenGrid::from(random_tensor({g.grid_tokens() + 1, g.dim}, rng), g);
}

BlockParams random_block(std::size_t d, std::size_t heads, const WindowSpec& spec, PoolMode mode,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BlockParams p = BlockParams::init(d, heads, spec, mode, rng);
  // Non-trivial layer-norm affines so the oracles exercise them.
  for (auto* a : {&p.local, &p.global}) {
    a->ln_gain = add_scalar(random_tensor({d}, rng, 0.3), 1.0);
    a->ln_bias = random_tensor({d}, rng, 0.3);
  }
  return p;
}

std::uint64_t pairs_of(const std::function<void()>& fn) {
  cost_reset();
  fn();
  return cost_snapshot().pair_count;
}

}  // namespace

TEST_CASE("window spec validation names the offending axis") {
  const WindowSpec ok{2, 2, 2};
  CHECK_NOTHROW(ok.validate(4, 4, 4));
  try {
    WindowSpec{2, 3, 2}.validate(4, 4, 4);
    FAIL("expected WindowSpecError");
  } catch (const WindowSpecError& e) {
    CHECK(std::string(e.what()).find("h=3") != std::string::npos);
    CHECK(std::string(e.what()).find("H=4") != std::string::npos);
  }
  CHECK_THROWS_AS(WindowSpec({3, 2, 2}).validate(4, 4, 4), WindowSpecError);
  CHECK_THROWS_AS(WindowSpec({2, 2, 3}).validate(4, 4, 4), WindowSpecError);
  CHECK_THROWS_AS(WindowSpec({0, 1, 1}).validate(4, 4, 4), WindowSpecError);
}

TEST_CASE("partition counts") {
  std::mt19937_64 rng(1);
  const Geometry g{4, 4, 4, 3};
  const TokenGrid grid = random_grid(g, rng);
  const WindowBlocks w = partition(grid, {2, 2, 2});
  CHECK(w.blocks.size() == 8);
  for (const auto& b : w.blocks) CHECK(b.shape() == Shape{8, 3});
  const WindowBlocks whole = partition(grid, {4, 4, 4});
  CHECK(whole.blocks.size() == 1);
  CHECK(max_abs_diff(whole.blocks[0], grid.grid()) == 0.0);
  CHECK_THROWS_AS(partition(grid, {3, 1, 1}), WindowSpecError);
}

TEST_CASE("window order covers every grid token once and stays inside its window") {
  const Geometry g{4, 6, 4, 1};
  const WindowSpec spec{2, 3, 2};
  const auto order = window_order(g, spec);
  CHECK(std::set<std::size_t>(order.begin(), order.end()).size() == g.grid_tokens());
  const std::size_t vol = spec.volume();
  for (std::size_t win = 0; win < order.size() / vol; ++win) {
    std::set<std::size_t> blocks;
    for (std::size_t i = 0; i < vol; ++i) {
      const std::size_t idx = order[win * vol + i];
      const std::size_t t = idx / g.spatial(), y = (idx % g.spatial()) / g.width, x = idx % g.width;
      blocks.insert((t / spec.f) * 100 + (y / spec.h) * 10 + x / spec.w);
    }
    CHECK(blocks.size() == 1);
  }
}

TEST_CASE("merge inverts partition") {
  std::mt19937_64 rng(2);
  for (const auto& [g, spec] : std::vector<std::pair<Geometry, WindowSpec>>{
           {{4, 4, 4, 3}, {2, 2, 2}}, {{2, 6, 4, 2}, {1, 3, 2}}, {{3, 2, 2, 5}, {3, 1, 2}}, {{2, 2, 2, 1}, {1, 1, 1}}}) {
    const TokenGrid grid = random_grid(g, rng);
    const TokenGrid back = merge(partition(grid, spec));
    CHECK(back.geometry == g);
    CHECK(max_abs_diff(back.tokens, grid.tokens) == 0.0);
  }
}

TEST_CASE("mhla: zero output projection is the identity") {
  std::mt19937_64 rng(3);
  const Geometry g{4, 4, 4, 8};
  BlockParams p = random_block(8, 2, {2, 2, 2}, PoolMode::average, 4);
  p.local.wo = Tensor({8, 8});
  const TokenGrid x = random_grid(g, rng);
  CHECK(max_abs_diff(mhla(x, p, {2, 2, 2}).tokens, x.tokens) == 0.0);
}

TEST_CASE("mhla: CLS passes through and pair count is F*H*W*f*h*w") {
  std::mt19937_64 rng(5);
  const Geometry g{4, 4, 4, 8};
  const BlockParams p = random_block(8, 2, {2, 2, 2}, PoolMode::average, 6);
  const TokenGrid x = random_grid(g, rng);
  TokenGrid y;
  cost_reset();
  y = mhla(x, p, {2, 2, 2});
  CHECK(cost_snapshot().pair_count == 512);
  CHECK(cost_snapshot().cls_pair_count == 0);
  CHECK(max_abs_diff(y.cls(), x.cls()) == 0.0);
}

TEST_CASE("mhla with one full-extent window equals full space-time attention") {
  std::mt19937_64 rng(7);
  const Geometry g{2, 2, 2, 16};
  for (int draw = 0; draw < 5; ++draw) {
    const BlockParams p = random_block(16, 2, {2, 2, 2}, PoolMode::average, 100 + draw);
    const TokenGrid x = random_grid(g, rng);
    const TokenGrid local = mhla(x, p, {2, 2, 2});
    const TokenGrid full = full_space_time_attention(x, p.local);
    CHECK(max_abs_diff(local.grid(), full.grid()) < 1e-10);
  }
}

TEST_CASE("mhla locality: tokens outside a window do not affect it") {
  std::mt19937_64 rng(8);
  const Geometry g{4, 4, 4, 8};
  const WindowSpec spec{2, 2, 2};
  const BlockParams p = random_block(8, 2, spec, PoolMode::average, 9);
  const TokenGrid x = random_grid(g, rng);
  const auto order = window_order(g, spec);
  const std::size_t vol = spec.volume();
  const TokenGrid base = mhla(x, p, spec);
  for (std::size_t win : {0u, 3u, 7u}) {
    TokenGrid masked = x;
    std::set<std::size_t> inside(order.begin() + win * vol, order.begin() + (win + 1) * vol);
    for (std::size_t i = 0; i < g.grid_tokens(); ++i)
      if (!inside.count(i))
        for (std::size_t j = 0; j < g.dim; ++j) masked.tokens[(i + 1) * g.dim + j] = 0.0;
    const TokenGrid out = mhla(masked, p, spec);
    for (std::size_t i : inside)
      for (std::size_t j = 0; j < g.dim; ++j)
        CHECK(out.tokens[(i + 1) * g.dim + j] == base.tokens[(i + 1) * g.dim + j]);
  }
}

TEST_CASE("mhla commutes with permutations of whole windows") {
  std::mt19937_64 rng(10);
  const Geometry g{4, 4, 4, 8};
  const WindowSpec spec{2, 2, 2};
  const BlockParams p = random_block(8, 2, spec, PoolMode::average, 11);
  const TokenGrid x = random_grid(g, rng);
  WindowBlocks w = partition(x, spec);
  std::vector<std::size_t> perm(w.blocks.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  WindowBlocks shuffled = w;
  for (std::size_t i = 0; i < perm.size(); ++i) shuffled.blocks[i] = w.blocks[perm[i]];
  WindowBlocks after = partition(mhla(merge(shuffled), p, spec), spec);
  WindowBlocks restored = after;
  for (std::size_t i = 0; i < perm.size(); ++i) restored.blocks[perm[i]] = after.blocks[i];

  const TokenGrid direct = mhla(x, p, spec);
  CHECK(max_abs_diff(merge(restored).tokens, direct.tokens) == 0.0);
}

TEST_CASE("window_pool average examples") {
  const Geometry g{2, 2, 2, 3};
  const WindowSpec spec{2, 1, 1};
  const PoolParams avg{PoolMode::average, {}, {}};

  TokenGrid same = TokenGrid::from(Tensor({9, 3}), g);
  for (std::size_t i = 1; i < 9; ++i)
    for (std::size_t j = 0; j < 3; ++j) same.tokens[i * 3 + j] = 0.1 * j + 0.7;
  const Tensor pooled_same = window_pool(same, spec, avg);
  CHECK(pooled_same.shape() == Shape{4, 3});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) CHECK(pooled_same.at(r, j) == doctest::Approx(0.1 * j + 0.7).epsilon(1e-15));

  // Window (t=0, s=0) holds tokens at flat rows 1 and 5; set them to 0 and 2v.
  TokenGrid pair = TokenGrid::from(Tensor({9, 3}), g);
  const double v[] = {1.5, -2.0, 0.25};
  for (std::size_t j = 0; j < 3; ++j) pair.tokens[5 * 3 + j] = 2.0 * v[j];
  const Tensor pooled_pair = window_pool(pair, spec, avg);
  for (std::size_t j = 0; j < 3; ++j) CHECK(pooled_pair.at(0, j) == v[j]);
}

TEST_CASE("learned pooling with averaging weights matches average pooling") {
  std::mt19937_64 rng(12);
  const Geometry g{4, 2, 4, 5};
  const WindowSpec spec{2, 1, 2};
  const std::size_t vol = spec.volume(), d = g.dim;
  PoolParams learned{PoolMode::learned, Tensor({vol * d, d}), Tensor({d})};
  for (std::size_t k = 0; k < vol; ++k)
    for (std::size_t j = 0; j < d; ++j) learned.weight[(k * d + j) * d + j] = 1.0 / static_cast<double>(vol);
  const TokenGrid y = random_grid(g, rng);
  CHECK(max_abs_diff(window_pool(y, spec, learned), window_pool(y, spec, PoolParams{})) < 1e-12);
  learned.weight = Tensor({vol * d + 1, d});
  CHECK_THROWS_AS(window_pool(y, spec, learned), DimensionError);
}

TEST_CASE("mhga: zero output projections give the identity") {
  std::mt19937_64 rng(13);
  const Geometry g{4, 4, 4, 8};
  for (PoolMode mode : {PoolMode::average, PoolMode::learned}) {
    BlockParams p = random_block(8, 2, {2, 2, 2}, mode, 14);
    p.global.wo = Tensor({8, 8});
    p.mlp.w2 = Tensor({32, 8});
    const TokenGrid y = random_grid(g, rng);
    CHECK(max_abs_diff(mhga(y, p, {2, 2, 2}).tokens, y.tokens) == 0.0);
  }
}

TEST_CASE("mhga with single-token pooling equals full attention over all tokens") {
  std::mt19937_64 rng(15);
  const Geometry g{2, 2, 2, 16};
  for (int draw = 0; draw < 5; ++draw) {
    const BlockParams p = random_block(16, 2, {1, 1, 1}, PoolMode::average, 200 + draw);
    const TokenGrid y = random_grid(g, rng);
    const TokenGrid full = full_space_time_attention(y, p.global, true);
    CHECK(max_abs_diff(global_attention(y, p, {1, 1, 1}).tokens, full.tokens) < 1e-10);
    CHECK(max_abs_diff(mhga(y, p, {1, 1, 1}).tokens, mlp_residual(full, p.mlp).tokens) < 1e-10);
  }
}

TEST_CASE("mhga pair counts") {
  std::mt19937_64 rng(16);
  const Geometry g{4, 4, 4, 8};
  const BlockParams p = random_block(8, 2, {2, 2, 2}, PoolMode::average, 17);
  const TokenGrid y = random_grid(g, rng);
  cost_reset();
  mhga(y, p, {2, 2, 2});
  const CostCounter c = cost_snapshot();
  // 64 queries x 8 pooled keys, plus CLS as query (9 keys) and as key (64 queries).
  CHECK(c.pair_count - c.cls_pair_count == 512);
  CHECK(c.cls_pair_count == 64 + 8 + 1);
}

TEST_CASE("full space-time attention examples") {
  std::mt19937_64 rng(18);
  SUBCASE("single token reduces to its value projection") {
    const Geometry g{1, 1, 1, 4};
    BlockParams p = random_block(4, 2, {1, 1, 1}, PoolMode::average, 19);
    p.local.wo = Tensor({4, 4});
    for (std::size_t i = 0; i < 4; ++i) p.local.wo[i * 4 + i] = 1.0;
    const TokenGrid x = random_grid(g, rng);
    const TokenGrid out = full_space_time_attention(x, p.local);
    const Tensor token = slice_rows(x.tokens, 1, 2);
    const Tensor v_parts[] = {p.local.wv[0], p.local.wv[1]};
    const Tensor value = matmul(layer_norm(token, p.local.ln_gain, p.local.ln_bias, kLayerNormEps), concat_cols(v_parts));
    CHECK(max_abs_diff(sub(slice_rows(out.tokens, 1, 2), token), value) < 1e-14);
  }
  SUBCASE("pair count is (F*H*W)^2") {
    const Geometry g{4, 4, 4, 8};
    const BlockParams p = random_block(8, 2, {1, 1, 1}, PoolMode::average, 20);
    const TokenGrid x = random_grid(g, rng);
    CHECK(pairs_of([&] { full_space_time_attention(x, p.local); }) == 4096);
  }
}

TEST_CASE("cost_report examples") {
  const CostReport r = cost_report(4, 4, 4, 2, 2, 2);
  CHECK(r.cost_local == 512);
  CHECK(r.cost_global == 512);
  CHECK(r.cost_logo_total == 1024);
  CHECK(r.cost_full == 4096);
  CHECK(r.cost_spatial_only == 1024);
  CHECK(r.cost_divided == 1280);
  CHECK(r.cost_mixing == 1024);
  CHECK(r.ordering_ok());

  for (const auto& [F, H, W] : std::vector<std::array<std::size_t, 3>>{{4, 4, 4}, {2, 3, 5}, {16, 7, 7}}) {
    const CostReport full = cost_report(F, H, W, F, H, W);
    CHECK(full.cost_local == full.cost_full);
    CHECK(full.cost_global == F * H * W);
  }
  CHECK_THROWS_AS(cost_report(4, 4, 4, 3, 2, 2), WindowSpecError);
  CHECK_THROWS_AS(cost_report(0, 4, 4, 1, 1, 1), WindowSpecError);
}

TEST_CASE("cost fields follow their closed forms and stay positive") {
  for (std::size_t F : {1, 2, 4, 6})
    for (std::size_t H : {1, 3, 4})
      for (std::size_t W : {2, 4})
        for (std::size_t f = 1; f <= F; ++f)
          for (std::size_t h = 1; h <= H; ++h)
            for (std::size_t w = 1; w <= W; ++w) {
              if (F % f || H % h || W % w) continue;
              const CostReport r = cost_report(F, H, W, f, h, w);
              const std::uint64_t n = F * H * W, S = H * W;
              CHECK(r.cost_local == n * f * h * w);
              CHECK(r.cost_global * (f * h * w) == n * n);
              CHECK(r.cost_logo_total == r.cost_local + r.cost_global);
              CHECK(r.cost_full == n * n);
              CHECK(r.cost_spatial_only == F * S * S);
              CHECK(r.cost_divided == F * S * S + F * F * S);
              CHECK(r.cost_mixing == F * S * S);
              CHECK(r.cost_global > 0);
            }
}

TEST_CASE("ordering over the reference grid follows the closed-form condition") {
  // n*v + n^2/v < F*S^2 + F^2*S  <=>  (v - F)(v - S) < 0 with n = F*S, S = H*W.
  std::size_t rows = 0, ordered = 0;
  for (std::size_t F : {4, 8, 16})
    for (std::size_t HW : {4, 8})
      for (std::size_t f = 1; f <= F; ++f)
        for (std::size_t h = 1; h <= HW; ++h)
          for (std::size_t w = 1; w <= HW; ++w) {
            if (F % f || HW % h || HW % w) continue;
            const std::size_t vol = f * h * w, S = HW * HW;
            if (vol < 2 || 2 * vol > F * S) continue;
            const CostReport r = cost_report(F, HW, HW, f, h, w);
            CAPTURE(F);
            CAPTURE(HW);
            CAPTURE(vol);
            CHECK(r.cost_logo_total < r.cost_full);
            CHECK(r.cost_divided < r.cost_full);
            const bool between = std::min(F, S) < vol && vol < std::max(F, S);
            CHECK(r.ordering_ok() == between);
            ++rows;
            ordered += r.ordering_ok();
          }
  CHECK(rows == 288);
  CHECK(ordered == 73);
}

TEST_CASE("measured block pairs equal local plus global cost") {
  std::mt19937_64 rng(21);
  const std::vector<std::array<std::size_t, 6>> configs = {
      {4, 4, 4, 2, 2, 2}, {2, 2, 2, 1, 1, 1}, {2, 4, 2, 2, 2, 1}, {4, 2, 2, 1, 2, 2}, {3, 3, 3, 3, 1, 1}};
  for (const auto& c : configs) {
    const Geometry g{c[0], c[1], c[2], 4};
    const WindowSpec spec{c[3], c[4], c[5]};
    const BlockParams p = random_block(4, 2, spec, PoolMode::average, 22);
    const TokenGrid x = random_grid(g, rng);
    cost_reset();
    logo_block(x, p, spec);
    const CostCounter cnt = cost_snapshot();
    const CostReport r = cost_report(c[0], c[1], c[2], c[3], c[4], c[5]);
    CHECK(cnt.pair_count - cnt.cls_pair_count == r.cost_local + r.cost_global);
  }
}

TEST_CASE("block gradients match central differences") {
  std::mt19937_64 rng(23);
  const Geometry g{2, 2, 2, 4};
  const WindowSpec spec{1, 2, 1};
  for (PoolMode mode : {PoolMode::average, PoolMode::learned}) {
    const BlockParams base = random_block(4, 2, spec, mode, 24);
    const Tensor x0 = random_tensor({g.grid_tokens() + 1, g.dim}, rng);

    // Every block parameter tensor plus the input tokens, flattened into one list.
    std::vector<Tensor> inputs = {x0};
    BlockParams probe = base;
    std::vector<Tensor*> slots;
    for (auto* a : {&probe.local, &probe.global}) {
      for (auto& t : a->wq) slots.push_back(&t);
      for (auto& t : a->wk) slots.push_back(&t);
      for (auto& t : a->wv) slots.push_back(&t);
      slots.insert(slots.end(), {&a->wo, &a->ln_gain, &a->ln_bias});
    }
    if (mode == PoolMode::learned) slots.insert(slots.end(), {&probe.pool.weight, &probe.pool.bias});
    slots.insert(slots.end(), {&probe.mlp.ln_gain, &probe.mlp.ln_bias, &probe.mlp.w1, &probe.mlp.b1, &probe.mlp.w2,
                               &probe.mlp.b2});
    for (auto* s : slots) inputs.push_back(*s);

    const auto f = [&](const std::vector<Tensor>& in) {
      BlockParams bp = base;
      std::vector<Tensor*> dst;
      for (auto* a : {&bp.local, &bp.global}) {
        for (auto& t : a->wq) dst.push_back(&t);
        for (auto& t : a->wk) dst.push_back(&t);
        for (auto& t : a->wv) dst.push_back(&t);
        dst.insert(dst.end(), {&a->wo, &a->ln_gain, &a->ln_bias});
      }
      if (mode == PoolMode::learned) dst.insert(dst.end(), {&bp.pool.weight, &bp.pool.bias});
      dst.insert(dst.end(), {&bp.mlp.ln_gain, &bp.mlp.ln_bias, &bp.mlp.w1, &bp.mlp.b1, &bp.mlp.w2, &bp.mlp.b2});
      for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = in[i + 1];
      return sum(logo_block(TokenGrid::from(in[0], g), bp, spec).tokens);
    };
    CHECK(gradcheck_inputs(f, inputs) < 1e-4);
  }
}
