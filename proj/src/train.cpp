#include "msmamba/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "msmamba/io_util.hpp"
#include "msmamba/kernels.hpp"
#include "msmamba/rng.hpp"

namespace msmamba {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 0) throw ConfigError("patience must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0,1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (clip_norm < 0.0) throw ConfigError("clip_norm must be >= 0");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
}

AdamState AdamState::init(const std::vector<NamedParam>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto& np : params) {
    const auto n = static_cast<std::size_t>(np.tensor->numel());
    s.m.emplace_back(n, 0.0);
    s.v.emplace_back(n, 0.0);
  }
  return s;
}

void adam_step(const std::vector<NamedParam>& params, const GradientMap& grads,
               AdamState& state, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) throw ConfigError("adam_step: state layout mismatch");

  // Materialize gradients in parameter order; reject non-finite entries.
  std::vector<Tensor> g;
  g.reserve(params.size());
  for (const auto& np : params) {
    Tensor gi = grads.get(*np.tensor);
    for (double v : gi.values()) {
      if (!std::isfinite(v)) {
        throw NumericError("adam_step: gradient for '" + np.name + "' is not finite");
      }
    }
    g.push_back(std::move(gi));
  }

  double clip_scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& gi : g) {
      for (double v : gi.values()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) clip_scale = cfg.clip_norm / norm;
  }

  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p].tensor->values_mut();
    auto gv = g[p].values();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = gv[i] * clip_scale;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

namespace {

// Resolved scales of the first encoder layer, averaged over the windows of
// the step (identical across windows for fixed/learnable strategies).
std::vector<double> mean_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out;
  if (rows.empty()) return out;
  out.assign(rows[0].size(), 0.0);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i];
  }
  for (auto& v : out) v /= static_cast<double>(rows.size());
  return out;
}

}  // namespace

RunHistory train(ForecastModel& model, const TimeSeriesDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (!ds.split_set) throw ConfigError("train: dataset must be split first");
  if (!ds.standardized) throw ConfigError("train: dataset must be standardized first");

  const int L = model.config.lookback, T = model.config.horizon;
  if (ds.variates != model.config.variates) {
    throw ConfigError("train: dataset has " + std::to_string(ds.variates) +
                      " variates, model expects " + std::to_string(model.config.variates));
  }
  const auto windows = make_windows(ds, Split::Train, L, T, 1);
  (void)make_windows(ds, Split::Val, L, T, 1);  // fail early if val admits none

  auto params = model.parameters();
  AdamState adam = AdamState::init(params);
  RunHistory history;

  auto best_snapshot = model.snapshot_params();
  int bad_epochs = 0;
  bool stop = false;
  const auto& K = kernels::active();

  for (int epoch = 0; epoch < cfg.max_epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop_i = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto count = static_cast<double>(stop_i - start);

      std::vector<std::vector<double>> acc(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        acc[p].assign(static_cast<std::size_t>(params[p].tensor->numel()), 0.0);
      }
      std::vector<std::vector<double>> step_scales;
      double batch_loss = 0.0;

      for (std::size_t k = start; k < stop_i; ++k) {
        const Window w = windows[order[k]];
        const Tensor x = window_input(ds, w, L);
        const Tensor y = window_target(ds, w, L, T);
        Tape tape;
        Tensor loss = mse_loss(model_forward(x, model), y);
        batch_loss += loss.item();
        GradientMap gm = tape.backward(loss);
        for (std::size_t p = 0; p < params.size(); ++p) {
          if (!gm.contains(*params[p].tensor)) continue;
          const Tensor& gi = gm.at(*params[p].tensor);
          K.axpy(acc[p].data(), 1.0, gi.values().data(), acc[p].size());
        }
        if (!model.layers.empty() && !model.layers[0].mixer.last_scales.empty()) {
          step_scales.push_back(model.layers[0].mixer.last_scales);
        }
      }

      GradientMap batch_grads;
      for (std::size_t p = 0; p < params.size(); ++p) {
        K.scale(acc[p].data(), acc[p].data(), 1.0 / count, acc[p].size());
        batch_grads.set(*params[p].tensor, Tensor(params[p].tensor->shape(), std::move(acc[p])));
      }
      adam_step(params, batch_grads, adam, cfg);

      epoch_loss += batch_loss;
      seen += stop_i - start;
      history.steps_taken = adam.step;
      if (model.config.strategy != StrategyKind::Fixed &&
          (adam.step - 1) % cfg.log_interval == 0) {
        history.scale_steps.push_back(adam.step);
        history.scale_values.push_back(mean_rows(step_scales));
      }
      if (cfg.max_steps > 0 && adam.step >= cfg.max_steps) {
        stop = true;
        break;
      }
    }

    history.train_mse.push_back(epoch_loss / static_cast<double>(seen));
    const double val = evaluate(model, ds, Split::Val).mse;
    history.val_mse.push_back(val);

    if (val < history.best_val) {
      history.best_val = val;
      history.best_epoch = static_cast<int>(history.val_mse.size()) - 1;
      best_snapshot = model.snapshot_params();
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs > cfg.patience) stop = true;
    }
  }

  model.restore_params(best_snapshot);
  return history;
}

EvalMetrics evaluate(const ForecastModel& model, const TimeSeriesDataset& ds, Split split,
                     bool denormalized) {
  const int L = model.config.lookback, T = model.config.horizon;
  if (ds.variates != model.config.variates) {
    throw ConfigError("evaluate: dataset has " + std::to_string(ds.variates) +
                      " variates, model expects " + std::to_string(model.config.variates));
  }
  if (denormalized && ds.stats.empty()) {
    throw ConfigError("evaluate: no stored statistics for de-normalized metrics");
  }
  const auto windows = make_windows(ds, split, L, T, 1);
  EvalMetrics out;
  const int D = ds.variates;
  for (const Window& w : windows) {
    const Tensor x = window_input(ds, w, L);
    const Tensor y = window_target(ds, w, L, T);
    const Tensor yhat = model_forward(x, model);
    double se = 0.0, ae = 0.0;
    for (int t = 0; t < T; ++t) {
      for (int d = 0; d < D; ++d) {
        double p = yhat[t * D + d], g = y[t * D + d];
        if (denormalized) {
          p = p * ds.stats.sigma[static_cast<std::size_t>(d)] + ds.stats.mu[static_cast<std::size_t>(d)];
          g = g * ds.stats.sigma[static_cast<std::size_t>(d)] + ds.stats.mu[static_cast<std::size_t>(d)];
        }
        const double r = p - g;
        se += r * r;
        ae += std::abs(r);
      }
    }
    const double n = static_cast<double>(T) * D;
    out.mse += se / n;
    out.mae += ae / n;
  }
  out.windows = static_cast<long long>(windows.size());
  if (out.windows == 0) throw ConfigError("evaluate: split admits no windows");
  out.mse /= static_cast<double>(out.windows);
  out.mae /= static_cast<double>(out.windows);
  return out;
}

void write_history_csv(const RunHistory& history, const std::string& path) {
  std::ostringstream os;
  os << "epoch,train_mse,val_mse\n";
  for (std::size_t e = 0; e < history.train_mse.size(); ++e) {
    os << e << ',' << fmt_g17(history.train_mse[e]) << ',' << fmt_g17(history.val_mse[e]) << '\n';
  }
  write_file_atomic(path, os.str());
}

bool log_scale_trajectory(const RunHistory& history, StrategyKind kind, const std::string& path,
                          std::string* notice) {
  if (kind == StrategyKind::Fixed) {
    if (notice) *notice = "fixed strategy has no scale trajectory; nothing written";
    return false;
  }
  std::ostringstream os;
  const std::size_t n = history.scale_values.empty() ? 0 : history.scale_values[0].size();
  os << "step";
  for (std::size_t i = 1; i <= n; ++i) os << ",scale_" << i;
  os << '\n';
  for (std::size_t r = 0; r < history.scale_values.size(); ++r) {
    os << history.scale_steps[r];
    for (double v : history.scale_values[r]) os << ',' << fmt_g17(v);
    os << '\n';
  }
  write_file_atomic(path, os.str());
  return true;
}

}  // namespace msmamba
