#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "msmamba/layer.hpp"

namespace msmamba {

enum class StrategyKind { Fixed, Learnable, Dynamic };

StrategyKind strategy_kind_from(std::string_view name);  // throws ConfigError
const char* to_string(StrategyKind kind);

/// Every architecture hyperparameter of the forecaster.
struct ModelConfig {
  int lookback = 96;  // L, input timesteps
  int horizon = 96;   // T, forecast timesteps
  int variates = 7;   // D
  int d_embed = 128;  // D_e, per-variate token width
  int depth = 1;      // N, encoder layers
  int scales = 4;     // n, Mamba blocks per direction per layer

  StrategyKind strategy = StrategyKind::Learnable;
  std::vector<double> alphas = {1.0, 2.0, 4.0, 8.0};  // fixed strategy only
  int dynamic_hidden = 16;                            // dynamic strategy MLP width

  int d_state = 16;
  int conv_width = 4;
  int expansion = 2;  // d_inner = expansion * d_embed
  bool bidirectional = true;
  int ffn_hidden = 0;    // 0 means d_embed
  bool residual = true;  // residual connection around each encoder layer

  int d_inner() const { return expansion * d_embed; }
  int ffn() const { return ffn_hidden > 0 ? ffn_hidden : d_embed; }
  int blocks_per_layer() const { return scales * (bidirectional ? 2 : 1); }
  void validate() const;  // throws ConfigError
};

struct EncoderLayer {
  MultiScaleLayer mixer;
  Tensor ln_gain;  // [D_e]
  Tensor ln_bias;  // [D_e]
  Tensor ffn_w1;   // [D_e x ffn]
  Tensor ffn_b1;   // [ffn]
  Tensor ffn_w2;   // [ffn x D_e]
  Tensor ffn_b2;   // [D_e]
};

/// Inverted-embedding multi-scale forecaster: each variate's length-L history
/// becomes one token, N encoder layers mix tokens, a linear head maps back to
/// the horizon.
struct ForecastModel {
  ModelConfig config;
  Tensor embed_w;  // [L x D_e]
  Tensor embed_b;  // [D_e]
  std::vector<EncoderLayer> layers;
  Tensor proj_w;  // [D_e x T]
  Tensor proj_b;  // [T]

  static ForecastModel init(const ModelConfig& cfg, std::uint64_t seed);
  /// Stable name -> tensor listing (construction order); the ordering
  /// contract backs checkpoints, the optimizer and the gradcheck report.
  std::vector<NamedParam> parameters();

  std::vector<std::vector<double>> snapshot_params();
  void restore_params(const std::vector<std::vector<double>>& snap);
};

/// [L x D] history -> [D x D_e] tokens through one shared L -> D_e affine map.
Tensor embed(const Tensor& x, const ForecastModel& m);
/// Multi-scale mix -> LayerNorm -> two-layer ReLU FFN (+ optional residual).
Tensor encoder_layer_forward(const Tensor& e, const EncoderLayer& layer, bool residual);
/// [D x D_e] -> [T x D] through one shared D_e -> T affine map per variate.
Tensor project(const Tensor& e, const ForecastModel& m);
Tensor model_forward(const Tensor& x, const ForecastModel& m);

Tensor mse_loss(const Tensor& yhat, const Tensor& y);

/// Analytic cost accounting: exact parameter count, multiply-accumulate count
/// for one batch-1 forward pass, and parameter memory at f64.
struct CostReport {
  long long param_count = 0;
  long long macs = 0;
  long long memory_bytes = 0;
};

CostReport cost_report(const ModelConfig& cfg);

}  // namespace msmamba
