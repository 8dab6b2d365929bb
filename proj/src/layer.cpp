#include "msmamba/layer.hpp"

#include <cmath>

namespace msmamba {

ScaleStrategy ScaleStrategy::fixed(std::vector<double> alphas) {
  if (alphas.empty()) throw ConfigError("fixed scales: need at least one alpha");
  for (double a : alphas) {
    if (!std::isfinite(a) || a <= 0.0) {
      throw ConfigError("fixed scales: alphas must be finite and positive");
    }
  }
  return {FixedScales{std::move(alphas)}};
}

ScaleStrategy ScaleStrategy::learnable(int n, std::mt19937_64& rng) {
  if (n < 1) throw ConfigError("learnable scales: n must be >= 1");
  std::uniform_real_distribution<double> dist(1.0, 4.0);
  std::vector<double> m(static_cast<std::size_t>(n));
  for (auto& v : m) v = dist(rng);
  return {LearnableScales{Tensor::param({n}, std::move(m))}};
}

ScaleStrategy ScaleStrategy::dynamic(int n, int flat_dim, int hidden, std::mt19937_64& rng) {
  if (n < 1 || flat_dim < 1 || hidden < 1) {
    throw ConfigError("dynamic scales: n, flat_dim and hidden must be >= 1");
  }
  DynamicScales d;
  d.w1 = init_linear_param(rng, flat_dim, {flat_dim, hidden});
  d.b1 = Tensor::param({hidden}, std::vector<double>(static_cast<std::size_t>(hidden), 0.0));
  d.w2 = init_linear_param(rng, hidden, {hidden, n});
  d.b2 = Tensor::param({n}, std::vector<double>(static_cast<std::size_t>(n), 0.0));
  return {std::move(d)};
}

int ScaleStrategy::scale_count() const {
  if (const auto* f = std::get_if<FixedScales>(&impl)) return static_cast<int>(f->alphas.size());
  if (const auto* l = std::get_if<LearnableScales>(&impl)) {
    return static_cast<int>(l->multipliers.numel());
  }
  return std::get<DynamicScales>(impl).b2.shape()[0];
}

const char* ScaleStrategy::kind() const {
  if (std::holds_alternative<FixedScales>(impl)) return "fixed";
  if (std::holds_alternative<LearnableScales>(impl)) return "learnable";
  return "dynamic";
}

void ScaleStrategy::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
  if (auto* l = std::get_if<LearnableScales>(&impl)) {
    out.push_back({prefix + ".multipliers", &l->multipliers});
  } else if (auto* d = std::get_if<DynamicScales>(&impl)) {
    out.push_back({prefix + ".mlp_w1", &d->w1});
    out.push_back({prefix + ".mlp_b1", &d->b1});
    out.push_back({prefix + ".mlp_w2", &d->w2});
    out.push_back({prefix + ".mlp_b2", &d->b2});
  }
}

Tensor resolve_scales(const ScaleStrategy& strategy, const Tensor& embedding) {
  if (const auto* f = std::get_if<FixedScales>(&strategy.impl)) {
    return Tensor({static_cast<int>(f->alphas.size())}, f->alphas);
  }
  if (const auto* l = std::get_if<LearnableScales>(&strategy.impl)) {
    return l->multipliers;
  }
  const auto& d = std::get<DynamicScales>(strategy.impl);
  if (!embedding.defined()) {
    throw ShapeError("resolve_scales: dynamic strategy requires the embedding input");
  }
  const int flat_dim = d.w1.shape()[0];
  if (embedding.numel() != flat_dim) {
    throw ShapeError("resolve_scales: flatten length " + std::to_string(embedding.numel()) +
                     " does not match MLP input " + std::to_string(flat_dim));
  }
  Tensor flat = reshape(embedding, {1, flat_dim});
  Tensor hidden = relu(add(matmul(flat, d.w1), d.b1));
  Tensor out = softplus(add(matmul(hidden, d.w2), d.b2));
  return reshape(out, {d.b2.shape()[0]});
}

MultiScaleLayer MultiScaleLayer::init(int n, int d_model, int d_inner, int d_state,
                                      int conv_width, ScaleStrategy strategy, bool bidirectional,
                                      std::mt19937_64& rng) {
  if (n < 1) throw ConfigError("MultiScaleLayer: n must be >= 1");
  if (strategy.scale_count() != n) {
    throw ConfigError("MultiScaleLayer: strategy provides " +
                      std::to_string(strategy.scale_count()) + " scales for n=" +
                      std::to_string(n));
  }
  MultiScaleLayer layer;
  layer.n = n;
  layer.strategy = std::move(strategy);
  layer.bidirectional = bidirectional;
  layer.blocks_fwd.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    layer.blocks_fwd.push_back(MambaBlock::init(d_model, d_inner, d_state, conv_width, rng));
  }
  if (bidirectional) {
    layer.blocks_bwd.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      layer.blocks_bwd.push_back(MambaBlock::init(d_model, d_inner, d_state, conv_width, rng));
    }
  }
  return layer;
}

void MultiScaleLayer::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
  strategy.collect_params(prefix + ".scales", out);
  for (int i = 0; i < n; ++i) {
    blocks_fwd[static_cast<std::size_t>(i)].collect_params(
        prefix + ".fwd" + std::to_string(i), out);
  }
  for (std::size_t i = 0; i < blocks_bwd.size(); ++i) {
    blocks_bwd[i].collect_params(prefix + ".bwd" + std::to_string(i), out);
  }
}

Tensor multiscale_forward(const Tensor& e, const MultiScaleLayer& layer, Direction dir,
                          const Tensor& scales) {
  if (scales.numel() != layer.n) {
    throw ShapeError("multiscale_forward: expected " + std::to_string(layer.n) +
                     " scales, got " + shape_str(scales.shape()));
  }
  const auto& blocks = dir == Direction::Forward ? layer.blocks_fwd : layer.blocks_bwd;
  if (blocks.empty()) {
    throw ConfigError("multiscale_forward: backward direction on a unidirectional layer");
  }
  Tensor input = dir == Direction::Backward ? reverse_rows(e) : e;
  Tensor fused;
  for (int i = 0; i < layer.n; ++i) {
    Tensor yi = mamba_block_forward(input, blocks[static_cast<std::size_t>(i)], pick(scales, i));
    fused = i == 0 ? yi : add(fused, yi);
  }
  fused = mul(fused, Tensor::scalar(1.0 / static_cast<double>(layer.n)));
  if (dir == Direction::Backward) fused = reverse_rows(fused);

  layer.last_scales.assign(scales.values().begin(), scales.values().end());
  return fused;
}

Tensor multiscale_forward(const Tensor& e, const MultiScaleLayer& layer, Direction dir) {
  return multiscale_forward(e, layer, dir, resolve_scales(layer.strategy, e));
}

Tensor bidirectional_forward(const Tensor& e, const MultiScaleLayer& layer) {
  // Scales are resolved once per layer invocation and shared by both
  // directions.
  Tensor scales = resolve_scales(layer.strategy, e);
  Tensor fwd = multiscale_forward(e, layer, Direction::Forward, scales);
  if (!layer.bidirectional) return fwd;
  return add(fwd, multiscale_forward(e, layer, Direction::Backward, scales));
}

}  // namespace msmamba
