#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "msmamba/layer.hpp"
#include "msmamba/rng.hpp"

using namespace msmamba;

namespace {

std::vector<double> uniform_vec(std::mt19937_64& rng, std::size_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (int i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void zero_block(MambaBlock& b) {
  std::vector<NamedParam> ps;
  b.collect_params("z", ps);
  for (auto& p : ps) {
    for (auto& v : p.tensor->values_mut()) v = 0.0;
  }
}

void tie_blocks(MultiScaleLayer& layer) {
  for (auto& b : layer.blocks_fwd) b.copy_params_from(layer.blocks_fwd[0]);
  for (auto& b : layer.blocks_bwd) b.copy_params_from(layer.blocks_fwd[0]);
}

}  // namespace

TEST_CASE("resolve_scales per strategy") {
  std::mt19937_64 rng(make_rng(21, "scales")());

  SUBCASE("fixed alphas verbatim") {
    const auto s = ScaleStrategy::fixed({1, 2, 4, 8});
    const Tensor scales = resolve_scales(s, Tensor());
    REQUIRE(scales.numel() == 4);
    CHECK(scales[0] == 1.0);
    CHECK(scales[1] == 2.0);
    CHECK(scales[2] == 4.0);
    CHECK(scales[3] == 8.0);
  }
  SUBCASE("fixed rejects bad alphas") {
    CHECK_THROWS_AS(ScaleStrategy::fixed({1, -2}), ConfigError);
    CHECK_THROWS_AS(ScaleStrategy::fixed({}), ConfigError);
  }
  SUBCASE("learnable initializes in [1,4]") {
    for (int trial = 0; trial < 20; ++trial) {
      const auto s = ScaleStrategy::learnable(5, rng);
      const Tensor scales = resolve_scales(s, Tensor());
      for (int i = 0; i < 5; ++i) {
        CHECK(scales[i] >= 1.0);
        CHECK(scales[i] <= 4.0);
      }
    }
  }
  SUBCASE("dynamic with zero weights gives ln 2") {
    auto s = ScaleStrategy::dynamic(3, 8, 4, rng);
    auto& d = std::get<DynamicScales>(s.impl);
    for (auto& v : d.w1.values_mut()) v = 0.0;
    for (auto& v : d.w2.values_mut()) v = 0.0;
    const Tensor scales = resolve_scales(s, Tensor::full({2, 4}, 0.7));
    REQUIRE(scales.numel() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(scales[i] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
  }
  SUBCASE("dynamic rejects mismatched flatten length") {
    const auto s = ScaleStrategy::dynamic(3, 8, 4, rng);
    CHECK_THROWS_AS(resolve_scales(s, Tensor::full({3, 4}, 0.1)), ShapeError);
  }
}

TEST_CASE("fusion identities") {
  std::mt19937_64 rng(make_rng(22, "fusion")());
  const Tensor e{Shape{5, 8}, uniform_vec(rng, 40, -1, 1)};

  SUBCASE("n=1 equals the single block") {
    auto layer = MultiScaleLayer::init(1, 8, 16, 4, 4, ScaleStrategy::fixed({1.0}), false, rng);
    const Tensor fused = multiscale_forward(e, layer, Direction::Forward);
    const Tensor single = mamba_block_forward(e, layer.blocks_fwd[0], Tensor::scalar(1.0));
    CHECK(max_abs_diff(fused, single) == 0.0);
  }
  SUBCASE("tied blocks at equal scales reproduce one block") {
    for (int k : {2, 4, 6}) {
      auto layer = MultiScaleLayer::init(
          k, 8, 16, 4, 4, ScaleStrategy::fixed(std::vector<double>(static_cast<std::size_t>(k), 2.0)),
          false, rng);
      tie_blocks(layer);
      const Tensor fused = multiscale_forward(e, layer, Direction::Forward);
      const Tensor single = mamba_block_forward(e, layer.blocks_fwd[0], Tensor::scalar(2.0));
      CHECK(max_abs_diff(fused, single) < 1e-12);
    }
  }
  SUBCASE("zeroed second block halves the output") {
    auto layer = MultiScaleLayer::init(2, 8, 16, 4, 4, ScaleStrategy::fixed({1.0, 1.0}), false, rng);
    zero_block(layer.blocks_fwd[1]);
    const Tensor fused = multiscale_forward(e, layer, Direction::Forward);
    const Tensor single = mamba_block_forward(e, layer.blocks_fwd[0], Tensor::scalar(1.0));
    for (int i = 0; i < fused.numel(); ++i) {
      CHECK(fused[i] == doctest::Approx(0.5 * single[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("bidirectional combination") {
  std::mt19937_64 rng(make_rng(23, "bidir")());
  const Tensor e{Shape{6, 8}, uniform_vec(rng, 48, -1, 1)};

  SUBCASE("zeroed backward blocks reduce to the forward output") {
    auto layer = MultiScaleLayer::init(2, 8, 16, 4, 4, ScaleStrategy::fixed({1.0, 2.0}), true, rng);
    for (auto& b : layer.blocks_bwd) zero_block(b);
    const Tensor both = bidirectional_forward(e, layer);
    const Tensor fwd = multiscale_forward(e, layer, Direction::Forward);
    CHECK(max_abs_diff(both, fwd) == 0.0);
  }
  SUBCASE("unidirectional layer takes the forward path only") {
    auto layer = MultiScaleLayer::init(2, 8, 16, 4, 4, ScaleStrategy::fixed({1.0, 2.0}), false, rng);
    const Tensor both = bidirectional_forward(e, layer);
    const Tensor fwd = multiscale_forward(e, layer, Direction::Forward);
    CHECK(max_abs_diff(both, fwd) == 0.0);
    CHECK_THROWS_AS(multiscale_forward(e, layer, Direction::Backward), ConfigError);
  }
  SUBCASE("palindromic input with tied directions is reversal-symmetric") {
    auto layer = MultiScaleLayer::init(2, 8, 16, 4, 4, ScaleStrategy::fixed({1.0, 2.0}), true, rng);
    tie_blocks(layer);
    // e[i] = e[rows-1-i]
    std::vector<double> vals = uniform_vec(rng, 48, -1, 1);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 8; ++c) vals[static_cast<std::size_t>((5 - r) * 8 + c)] = vals[static_cast<std::size_t>(r * 8 + c)];
    }
    const Tensor pal{Shape{6, 8}, vals};
    const Tensor out = bidirectional_forward(pal, layer);
    const Tensor rev = reverse_rows(out);
    CHECK(max_abs_diff(out, rev) < 1e-12);
  }
  SUBCASE("backward path is the forward path on the reversed input") {
    auto layer = MultiScaleLayer::init(2, 8, 16, 4, 4, ScaleStrategy::fixed({1.0, 2.0}), true, rng);
    tie_blocks(layer);
    const Tensor scales = resolve_scales(layer.strategy, e);
    const Tensor bwd = multiscale_forward(e, layer, Direction::Backward, scales);
    const Tensor ref =
        reverse_rows(multiscale_forward(reverse_rows(e), layer, Direction::Forward, scales));
    CHECK(max_abs_diff(bwd, ref) == 0.0);
  }
}

TEST_CASE("scale sensitivity at the layer level") {
  std::mt19937_64 rng(make_rng(24, "sens")());
  const Tensor e{Shape{4, 8}, uniform_vec(rng, 32, -1, 1)};
  auto layer = MultiScaleLayer::init(1, 8, 16, 4, 4, ScaleStrategy::fixed({1.0}), false, rng);
  const Tensor y1 = multiscale_forward(e, layer, Direction::Forward, Tensor({1}, {1.0}));
  const Tensor y8 = multiscale_forward(e, layer, Direction::Forward, Tensor({1}, {8.0}));
  CHECK(max_abs_diff(y1, y8) > 1e-6);
}

TEST_CASE("learnable and dynamic strategies are differentiable") {
  std::mt19937_64 rng(make_rng(25, "strategy-grad")());
  const Tensor e{Shape{3, 6}, uniform_vec(rng, 18, -1, 1)};
  const Tensor probe{Shape{3, 6}, uniform_vec(rng, 18, -0.005, 0.005)};

  SUBCASE("gradients reach the learnable multipliers") {
    auto layer = MultiScaleLayer::init(2, 6, 12, 3, 4, ScaleStrategy::learnable(2, rng), true, rng);
    auto& mult = std::get<LearnableScales>(layer.strategy.impl).multipliers;
    Tape tape;
    GradientMap g = tape.backward(mean(mul(bidirectional_forward(e, layer), probe)));
    const Tensor gm = g.at(mult);
    CHECK((std::abs(gm[0]) > 0.0 || std::abs(gm[1]) > 0.0));
  }
  SUBCASE("gradient check through the dynamic MLP") {
    auto layer = MultiScaleLayer::init(2, 6, 12, 3, 4, ScaleStrategy::dynamic(2, 18, 4, rng),
                                       true, rng);
    std::vector<NamedParam> named;
    layer.collect_params("layer", named);
    std::vector<Tensor> params;
    for (auto& np : named) params.push_back(*np.tensor);
    const auto f = [&] { return mean(mul(bidirectional_forward(e, layer), probe)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-5);
  }
  SUBCASE("gradient check through the learnable multipliers") {
    auto layer = MultiScaleLayer::init(2, 6, 12, 3, 4, ScaleStrategy::learnable(2, rng), true, rng);
    std::vector<NamedParam> named;
    layer.collect_params("layer", named);
    std::vector<Tensor> params;
    for (auto& np : named) params.push_back(*np.tensor);
    const auto f = [&] { return mean(mul(bidirectional_forward(e, layer), probe)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-5);
  }
}

TEST_CASE("last_scales instrumentation tracks the resolved values") {
  std::mt19937_64 rng(make_rng(26, "instr")());
  const Tensor e{Shape{3, 6}, uniform_vec(rng, 18, -1, 1)};
  auto layer = MultiScaleLayer::init(3, 6, 12, 3, 4, ScaleStrategy::fixed({1, 2, 4}), false, rng);
  (void)multiscale_forward(e, layer, Direction::Forward);
  REQUIRE(layer.last_scales.size() == 3);
  CHECK(layer.last_scales[0] == 1.0);
  CHECK(layer.last_scales[2] == 4.0);
}
