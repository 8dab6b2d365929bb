#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "msmamba/data.hpp"
#include "msmamba/model.hpp"

namespace msmamba {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 10;
  int patience = 3;  // early-stopping epochs without val improvement
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 0.0;  // global-norm gradient clip; 0 disables
  long long max_steps = 0;  // optimizer-step cap; 0 means unlimited
  int log_interval = 1;     // scale-trajectory rows every this many steps

  void validate() const;
};

/// Per-parameter Adam moments, aligned with the model's parameter order.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  long long step = 0;

  static AdamState init(const std::vector<NamedParam>& params);
};

/// Bias-corrected Adam update, with optional global-norm clipping applied to
/// the gradients first. Non-finite gradients abort with the parameter name.
void adam_step(const std::vector<NamedParam>& params, const GradientMap& grads,
               AdamState& state, const TrainConfig& cfg);

struct RunHistory {
  std::vector<double> train_mse;  // one entry per completed epoch
  std::vector<double> val_mse;
  std::vector<long long> scale_steps;             // optimizer step per logged row
  std::vector<std::vector<double>> scale_values;  // resolved scales (layer 0)
  int best_epoch = -1;
  double best_val = std::numeric_limits<double>::infinity();
  long long steps_taken = 0;
};

/// Epoch loop over seeded-shuffled train windows with per-epoch validation,
/// best-checkpoint tracking and early stopping; the model ends at its best
/// validation parameters. A pure function of (dataset, config, seed).
RunHistory train(ForecastModel& model, const TimeSeriesDataset& ds, const TrainConfig& cfg);

struct EvalMetrics {
  double mse = 0.0;
  double mae = 0.0;
  long long windows = 0;
};

/// Mean over all stride-1 windows of per-window MSE / MAE. Metrics are in
/// the dataset's (normalized) space unless denormalized is set, which
/// rescales per variate through the dataset's stored statistics.
EvalMetrics evaluate(const ForecastModel& model, const TimeSeriesDataset& ds, Split split,
                     bool denormalized = false);

void write_history_csv(const RunHistory& history, const std::string& path);

/// Per-step scale values as CSV (step, scale_1..scale_n). Returns false and
/// writes nothing for the fixed strategy (with a notice on the given stream).
bool log_scale_trajectory(const RunHistory& history, StrategyKind kind, const std::string& path,
                          std::string* notice = nullptr);

}  // namespace msmamba
