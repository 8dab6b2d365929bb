#pragma once

#include <string>
#include <variant>
#include <vector>

#include "msmamba/ssm.hpp"

namespace msmamba {

/// Fixed multipliers: hyperparameters, positive and frozen.
struct FixedScales {
  std::vector<double> alphas;
};

/// One trainable multiplier per block, initialized uniformly in [1, 4].
struct LearnableScales {
  Tensor multipliers;  // [n]
};

/// Scales produced by a two-layer MLP over the flattened layer input,
/// mapped through softplus so each resolved scale stays positive.
struct DynamicScales {
  Tensor w1;  // [flat_dim x hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden x n]
  Tensor b2;  // [n]
};

struct ScaleStrategy {
  std::variant<FixedScales, LearnableScales, DynamicScales> impl;

  static ScaleStrategy fixed(std::vector<double> alphas);
  static ScaleStrategy learnable(int n, std::mt19937_64& rng);
  static ScaleStrategy dynamic(int n, int flat_dim, int hidden, std::mt19937_64& rng);

  int scale_count() const;
  const char* kind() const;  // "fixed" | "learnable" | "dynamic"
  bool is_fixed() const { return std::holds_alternative<FixedScales>(impl); }
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

/// The n per-block scales for one layer invocation. Fixed returns the alphas
/// verbatim, Learnable the current multiplier values, Dynamic the softplus'd
/// MLP output over flatten(embedding) (differentiable end to end; the
/// embedding argument is ignored by the other two strategies).
Tensor resolve_scales(const ScaleStrategy& strategy, const Tensor& embedding);

enum class Direction { Forward, Backward };

/// n Mamba blocks at distinct scales, fused by arithmetic mean, with an
/// independent backward-direction block set when bidirectional.
struct MultiScaleLayer {
  int n = 1;
  std::vector<MambaBlock> blocks_fwd;
  std::vector<MambaBlock> blocks_bwd;  // empty unless bidirectional
  ScaleStrategy strategy;
  bool bidirectional = true;
  // Scales observed by the most recent forward; instrumentation for the
  // training loop's trajectory log.
  mutable std::vector<double> last_scales;

  static MultiScaleLayer init(int n, int d_model, int d_inner, int d_state, int conv_width,
                              ScaleStrategy strategy, bool bidirectional, std::mt19937_64& rng);
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

/// Mean of the n block outputs for one direction, with pre-resolved scales.
/// The backward direction reverses the token axis before the blocks and
/// un-reverses the fused output. Blocks are evaluated in index order and
/// summed canonically (0..n-1) so results are reproducible.
Tensor multiscale_forward(const Tensor& e, const MultiScaleLayer& layer, Direction dir,
                          const Tensor& scales);
/// Same, resolving the scales from e.
Tensor multiscale_forward(const Tensor& e, const MultiScaleLayer& layer, Direction dir);

/// Element-wise sum of the forward and backward passes (scales resolved once
/// from e and shared); forward path alone when the layer is unidirectional.
Tensor bidirectional_forward(const Tensor& e, const MultiScaleLayer& layer);

}  // namespace msmamba
