// msmamba: train, evaluate and profile multi-scale selective-SSM forecasters.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "msmamba/checkpoint.hpp"
#include "msmamba/io_util.hpp"
#include "msmamba/model.hpp"
#include "msmamba/rng.hpp"
#include "msmamba/train.hpp"

namespace fs = std::filesystem;
using namespace msmamba;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitGradcheck = 5;

[[noreturn]] void fail(int code, const char* kind, const std::string& msg) {
  std::cerr << "error code=" << code << " kind=" << kind << " msg=\"" << msg << "\"\n";
  std::exit(code);
}

// ---- shared flag bundles ----------------------------------------------------

struct ModelFlags {
  ModelConfig cfg;
  std::string strategy_name = "learnable";

  void attach(CLI::App* app) {
    app->add_option("--L", cfg.lookback, "lookback length (timesteps)")->capture_default_str();
    app->add_option("--T", cfg.horizon, "forecast horizon (timesteps)")->capture_default_str();
    app->add_option("--D", cfg.variates, "variate count (ignored when --data supplies it)")
        ->capture_default_str();
    app->add_option("--De", cfg.d_embed, "embedding width per variate token")
        ->capture_default_str();
    app->add_option("--depth", cfg.depth, "encoder layer count")->capture_default_str();
    app->add_option("--scales", cfg.scales, "Mamba blocks per direction per layer")
        ->capture_default_str();
    app->add_option("--strategy", strategy_name, "scale strategy: fixed|learnable|dynamic")
        ->capture_default_str();
    app->add_option("--alphas", cfg.alphas, "fixed-strategy multipliers")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--dynamic-hidden", cfg.dynamic_hidden, "dynamic-strategy MLP width")
        ->capture_default_str();
    app->add_option("--d-state", cfg.d_state, "SSM state width")->capture_default_str();
    app->add_option("--conv-width", cfg.conv_width, "causal conv kernel width")
        ->capture_default_str();
    app->add_option("--expansion", cfg.expansion, "d_inner = expansion * De")
        ->capture_default_str();
    app->add_option("--bidirectional", cfg.bidirectional, "run blocks in both directions")
        ->capture_default_str();
    app->add_option("--ffn", cfg.ffn_hidden, "FFN hidden width (0 = De)")->capture_default_str();
    app->add_option("--residual", cfg.residual, "residual connection around encoder layers")
        ->capture_default_str();
  }

  ModelConfig resolve() const {
    ModelConfig out = cfg;
    out.strategy = strategy_kind_from(strategy_name);
    return out;
  }
};

struct DataFlags {
  std::string data_path;
  bool synthetic = false;
  std::int64_t synth_length = 10000;
  std::vector<double> synth_periods = {8.0, 64.0};
  std::vector<double> synth_amps = {1.0, 1.0};
  double synth_noise = 0.1;
  std::vector<double> ratios = {0.7, 0.1, 0.2};

  void attach(CLI::App* app, bool with_split = true) {
    app->add_option("--data", data_path, "CSV dataset path");
    app->add_flag("--synthetic", synthetic, "generate the synthetic multi-scale dataset");
    app->add_option("--synth-length", synth_length, "synthetic timesteps")
        ->capture_default_str();
    app->add_option("--synth-periods", synth_periods, "synthetic component periods")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--synth-amps", synth_amps, "synthetic component amplitudes")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--synth-noise", synth_noise, "synthetic Gaussian noise sigma")
        ->capture_default_str();
    if (with_split) {
      app->add_option("--split-ratios", ratios, "train,val,test ratios")
          ->delimiter(',')
          ->capture_default_str();
    }
  }

  SynthSpec synth_spec(int variates, std::uint64_t seed) const {
    SynthSpec spec;
    spec.length = synth_length;
    spec.variates = variates;
    spec.periods = synth_periods;
    spec.amplitudes = synth_amps;
    spec.noise_sigma = synth_noise;
    spec.seed = seed;
    return spec;
  }

  // Loads or generates the raw series; variates resolve from the file when
  // --data is given.
  TimeSeriesDataset load_raw(int synth_variates, std::uint64_t seed) const {
    if (synthetic) return synth_multiscale(synth_spec(synth_variates, seed));
    if (data_path.empty()) {
      fail(kExitConfig, "config", "either --data or --synthetic is required");
    }
    return load_csv(data_path);
  }
};

struct TrainFlags {
  TrainConfig cfg;
  void attach(CLI::App* app) {
    app->add_option("--lr", cfg.learning_rate, "Adam learning rate")->capture_default_str();
    app->add_option("--batch", cfg.batch_size, "windows per optimizer step")
        ->capture_default_str();
    app->add_option("--epochs", cfg.max_epochs, "maximum training epochs")
        ->capture_default_str();
    app->add_option("--patience", cfg.patience, "early-stopping patience (epochs)")
        ->capture_default_str();
    app->add_option("--clip-norm", cfg.clip_norm, "global gradient-norm clip (0 = off)")
        ->capture_default_str();
    app->add_option("--max-steps", cfg.max_steps, "optimizer-step cap (0 = unlimited)")
        ->capture_default_str();
    app->add_option("--log-interval", cfg.log_interval, "steps between trajectory rows")
        ->capture_default_str();
  }
};

void ensure_outdir(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) fail(kExitConfig, "config", "cannot create output directory '" + out + "'");
}

void write_manifest(CLI::App* sub, const std::string& out) {
  std::string text = "# msmamba manifest: resolved flags for " + sub->get_name() + "\n";
  text += sub->config_to_str(true, false);
  write_file_atomic(out + "/manifest.txt", text);
}

std::string csv_join_metrics(const std::vector<std::array<double, 3>>& rows) {
  std::ostringstream os;
  os << "horizon,mse,mae\n";
  for (const auto& r : rows) {
    os << static_cast<long long>(r[0]) << ',' << fmt_g17(r[1]) << ',' << fmt_g17(r[2]) << '\n';
  }
  return os.str();
}

// Prepares a split, standardized dataset for training.
TimeSeriesDataset prepare_train_dataset(const DataFlags& df, const ModelConfig& cfg,
                                        std::uint64_t seed) {
  TimeSeriesDataset ds = df.load_raw(cfg.variates, seed);
  if (df.ratios.size() != 3) fail(kExitConfig, "config", "--split-ratios needs three values");
  chronological_split(ds, df.ratios[0], df.ratios[1], df.ratios[2],
                      static_cast<std::int64_t>(cfg.lookback) + cfg.horizon);
  standardize(ds);
  return ds;
}

// ---- commands ---------------------------------------------------------------

struct TrainCmd {
  ModelFlags model;
  DataFlags data;
  TrainFlags train_flags;
  std::uint64_t seed = 0;
  std::string out = "msmamba_out";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("train", "train a forecaster and write its artifacts");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    model.attach(sub);
    data.attach(sub);
    train_flags.attach(sub);
    sub->add_option("--seed", seed, "root seed for init, shuffling and synthesis")
        ->capture_default_str();
    sub->add_option("--out", out, "output directory")
        ->envname("MSMAMBA_OUT")
        ->capture_default_str();
  }

  int run() {
    ModelConfig cfg = model.resolve();
    TimeSeriesDataset ds = prepare_train_dataset(data, cfg, seed);
    cfg.variates = ds.variates;
    cfg.validate();

    TrainConfig tc = train_flags.cfg;
    tc.seed = seed;

    ForecastModel net = ForecastModel::init(cfg, seed);
    RunHistory history = train(net, ds, tc);

    ensure_outdir(out);
    save_checkpoint(out + "/checkpoint.ckpt", net, ds.stats);
    write_history_csv(history, out + "/history.csv");
    std::string notice;
    const bool wrote_traj =
        log_scale_trajectory(history, cfg.strategy, out + "/delta_trajectory.csv", &notice);
    write_manifest(sub, out);

    const CostReport cost = cost_report(cfg);
    std::cout << "trained " << history.train_mse.size() << " epoch(s), " << history.steps_taken
              << " step(s)\n";
    std::cout << "best val mse " << fmt_g17(history.best_val) << " at epoch "
              << history.best_epoch << "\n";
    std::cout << "parameters " << cost.param_count << ", artifacts in " << out << "\n";
    if (!wrote_traj && !notice.empty()) std::cout << "note: " << notice << "\n";
    return 0;
  }
};

struct EvalCmd {
  std::vector<std::string> checkpoints;
  std::string data_path;
  std::string split_name = "test";
  bool denormalized = false;
  std::string out = "msmamba_out";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("eval", "evaluate checkpoints (one metrics row per horizon)");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    sub->add_option("--checkpoint", checkpoints, "checkpoint file (repeat per horizon)")
        ->required();
    sub->add_option("--data", data_path, "CSV dataset path")->required();
    sub->add_option("--split", split_name, "train|val|test")->capture_default_str();
    sub->add_flag("--denormalized", denormalized, "report metrics on the raw scale");
    sub->add_option("--out", out, "output directory")
        ->envname("MSMAMBA_OUT")
        ->capture_default_str();
  }

  int run() {
    Split split;
    if (split_name == "train") split = Split::Train;
    else if (split_name == "val") split = Split::Val;
    else if (split_name == "test") split = Split::Test;
    else fail(kExitConfig, "config", "unknown split '" + split_name + "'");

    std::vector<std::array<double, 3>> rows;
    for (const auto& ckpt_path : checkpoints) {
      NormalizationStats stats;
      ForecastModel net = load_checkpoint(ckpt_path, &stats);
      TimeSeriesDataset ds = load_csv(data_path);
      if (ds.variates != net.config.variates) {
        fail(kExitConfig, "config",
             "dataset has " + std::to_string(ds.variates) + " variates, checkpoint expects " +
                 std::to_string(net.config.variates));
      }
      chronological_split(ds, 0.7, 0.1, 0.2,
                          static_cast<std::int64_t>(net.config.lookback) + net.config.horizon);
      standardize_with(ds, stats);
      const EvalMetrics em = evaluate(net, ds, split, denormalized);
      rows.push_back({static_cast<double>(net.config.horizon), em.mse, em.mae});
    }
    std::array<double, 3> avg = {0, 0, 0};
    for (const auto& r : rows) {
      avg[1] += r[1];
      avg[2] += r[2];
    }
    avg[1] /= static_cast<double>(rows.size());
    avg[2] /= static_cast<double>(rows.size());

    std::cout << "horizon       mse        mae\n";
    for (const auto& r : rows) {
      std::printf("%7lld  %9.6f  %9.6f\n", static_cast<long long>(r[0]), r[1], r[2]);
    }
    std::printf("    avg  %9.6f  %9.6f\n", avg[1], avg[2]);

    std::ostringstream os;
    os << csv_join_metrics(rows);
    os << "avg," << fmt_g17(avg[1]) << ',' << fmt_g17(avg[2]) << '\n';
    ensure_outdir(out);
    write_file_atomic(out + "/metrics.csv", os.str());
    return 0;
  }
};

struct ForecastCmd {
  std::string checkpoint;
  std::string data_path;
  std::int64_t origin = -1;  // default: last admissible
  std::string out = "msmamba_out";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("forecast", "write one de-normalized T x D forecast CSV");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    sub->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    sub->add_option("--data", data_path, "CSV dataset path")->required();
    sub->add_option("--origin", origin, "input window start index (-1 = last admissible)")
        ->capture_default_str();
    sub->add_option("--out", out, "output directory")
        ->envname("MSMAMBA_OUT")
        ->capture_default_str();
  }

  int run() {
    NormalizationStats stats;
    ForecastModel net = load_checkpoint(checkpoint, &stats);
    TimeSeriesDataset ds = load_csv(data_path);
    if (ds.variates != net.config.variates) {
      fail(kExitConfig, "config",
           "dataset has " + std::to_string(ds.variates) + " variates, checkpoint expects " +
               std::to_string(net.config.variates));
    }
    const int L = net.config.lookback, T = net.config.horizon, D = ds.variates;
    const std::int64_t last = ds.timesteps - L;
    if (last < 0) fail(kExitConfig, "config", "dataset shorter than the lookback window");
    if (origin < 0) origin = last;
    if (origin > last) {
      fail(kExitConfig, "config",
           "origin " + std::to_string(origin) + " exceeds last admissible index " +
               std::to_string(last));
    }
    standardize_with(ds, stats);
    const Tensor x = window_input(ds, Window{origin}, L);
    const Tensor yhat = model_forward(x, net);

    std::ostringstream os;
    for (int d = 0; d < D; ++d) {
      if (d) os << ',';
      os << (d < static_cast<int>(stats.names.size()) ? stats.names[static_cast<std::size_t>(d)]
                                                      : ds.names[static_cast<std::size_t>(d)]);
    }
    os << '\n';
    for (int t = 0; t < T; ++t) {
      for (int d = 0; d < D; ++d) {
        const double raw = yhat[t * D + d] * stats.sigma[static_cast<std::size_t>(d)] +
                           stats.mu[static_cast<std::size_t>(d)];
        if (d) os << ',';
        os << fmt_g17(raw);
      }
      os << '\n';
    }
    ensure_outdir(out);
    write_file_atomic(out + "/forecast.csv", os.str());
    std::cout << "wrote " << T << "x" << D << " forecast from origin " << origin << " to " << out
              << "/forecast.csv\n";
    return 0;
  }
};

struct SynthCmd {
  DataFlags data;
  int variates = 4;
  std::uint64_t seed = 0;
  std::string out_file = "synthetic.csv";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("synth", "generate the synthetic multi-scale dataset CSV");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    data.attach(sub, /*with_split=*/false);
    sub->add_option("--D", variates, "variate count")->capture_default_str();
    sub->add_option("--seed", seed, "generator seed")->capture_default_str();
    sub->add_option("--out-file", out_file, "destination CSV path")->capture_default_str();
  }

  int run() {
    TimeSeriesDataset ds = synth_multiscale(data.synth_spec(variates, seed));
    write_dataset_csv(ds, out_file);
    std::cout << "wrote " << ds.timesteps << "x" << ds.variates << " synthetic series to "
              << out_file << "\n";
    return 0;
  }
};

struct GradcheckCmd {
  ModelFlags model;
  std::uint64_t seed = 0;
  bool inject_error = false;
  std::string out = "msmamba_out";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("gradcheck",
                             "verify backward gradients against finite differences");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    // Tiny defaults keep the finite-difference sweep at seconds scale.
    model.cfg.lookback = 8;
    model.cfg.horizon = 4;
    model.cfg.variates = 3;
    model.cfg.d_embed = 16;
    model.cfg.scales = 2;
    model.cfg.d_state = 4;
    model.cfg.alphas = {1.0, 2.0};
    model.cfg.dynamic_hidden = 8;
    model.attach(sub);
    sub->add_option("--seed", seed, "probe seed")->capture_default_str();
    sub->add_flag("--inject-grad-error", inject_error,
                  "negative control: corrupt one analytic gradient")
        ->group("");  // hidden
    sub->add_option("--out", out, "output directory")
        ->envname("MSMAMBA_OUT")
        ->capture_default_str();
  }

  int run() {
    ModelConfig cfg = model.resolve();
    cfg.validate();
    const CostReport cost = cost_report(cfg);
    if (cost.param_count >= 50000) {
      fail(kExitConfig, "config",
           "gradcheck config has " + std::to_string(cost.param_count) +
               " parameters; keep it under 50k");
    }

    ForecastModel net = ForecastModel::init(cfg, seed);
    auto rng = make_rng(seed, "gradcheck-probe");
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::vector<double> xv(static_cast<std::size_t>(cfg.lookback) * cfg.variates);
    for (auto& v : xv) v = unit(rng);
    const Tensor x(Shape{cfg.lookback, cfg.variates}, xv);
    // Targets near the forecast keep |loss| small so finite differences stay
    // well conditioned against the 1e-8 relative-error floor.
    Tensor y = model_forward(x, net);
    {
      std::uniform_real_distribution<double> jitter(-0.005, 0.005);
      auto vals = y.values_mut();
      for (auto& v : vals) v += jitter(rng);
    }
    const auto f = [&] { return mse_loss(model_forward(x, net), y); };

    GradientMap analytic;
    {
      Tape tape;
      Tensor loss = f();
      if (!std::isfinite(loss.item())) fail(kExitNumeric, "numeric", "loss is not finite");
      analytic = tape.backward(loss);
    }

    auto params = net.parameters();
    const double step = 1e-5;
    double worst_overall = 0.0;
    std::ostringstream os;
    os << "group,size,max_rel_err\n";
    std::cout << "group                     size   max_rel_err\n";
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor& t = *params[p].tensor;
      Tensor g = analytic.get(t);
      if (inject_error && p == 0) {
        g.values_mut()[0] += 1.0;  // negative-control corruption
      }
      auto vals = t.values_mut();
      double worst = 0.0;
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double orig = vals[i];
        vals[i] = orig + step;
        const double f1 = f().item();
        vals[i] = orig - step;
        const double f2 = f().item();
        vals[i] = orig;
        if (!std::isfinite(f1) || !std::isfinite(f2)) {
          fail(kExitNumeric, "numeric", "probe loss is not finite");
        }
        const double numeric = (f1 - f2) / (2.0 * step);
        const double exact = g[static_cast<std::int64_t>(i)];
        const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(exact - numeric) / denom);
      }
      worst_overall = std::max(worst_overall, worst);
      os << params[p].name << ',' << vals.size() << ',' << fmt_g17(worst) << '\n';
      std::printf("%-24s %6zu   %.3e\n", params[p].name.c_str(), vals.size(), worst);
    }
    ensure_outdir(out);
    write_file_atomic(out + "/gradcheck.csv", os.str());
    std::cout << "worst " << fmt_g17(worst_overall) << " (threshold 1e-5)\n";
    if (worst_overall >= 1e-5) {
      std::cerr << "error code=" << kExitGradcheck << " kind=gradcheck msg=\"max relative error "
                << fmt_g17(worst_overall) << " exceeds 1e-5\"\n";
      return kExitGradcheck;
    }
    return 0;
  }
};

struct ProfileCmd {
  ModelFlags model;
  std::vector<int> n_list;
  std::vector<int> d_list;
  bool time_forward = false;
  std::uint64_t seed = 0;
  std::string out = "msmamba_out";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("profile", "parameter/MAC/memory accounting over a config grid");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    model.attach(sub);
    sub->add_option("--n-list", n_list, "scale counts to profile")->delimiter(',');
    sub->add_option("--D-list", d_list, "variate counts to profile")->delimiter(',');
    sub->add_flag("--time", time_forward, "also wall-clock one forward pass (with warmup)");
    sub->add_option("--seed", seed, "timing-input seed")->capture_default_str();
    sub->add_option("--out", out, "output directory")
        ->envname("MSMAMBA_OUT")
        ->capture_default_str();
  }

  int run() {
    const ModelConfig base = model.resolve();
    if (n_list.empty()) n_list = {base.scales};
    if (d_list.empty()) d_list = {base.variates};

    std::ostringstream os;
    os << "n,D,params,macs,memory_bytes" << (time_forward ? ",forward_ms" : "") << '\n';
    std::cout << "   n     D       params          MACs      memory"
              << (time_forward ? "   forward_ms" : "") << "\n";
    for (int n : n_list) {
      for (int D : d_list) {
        ModelConfig cfg = base;
        cfg.scales = n;
        cfg.variates = D;
        if (cfg.strategy == StrategyKind::Fixed &&
            static_cast<int>(cfg.alphas.size()) != n) {
          // Doubling ladder keeps fixed-strategy grids valid at any n.
          cfg.alphas.clear();
          for (int i = 0; i < n; ++i) cfg.alphas.push_back(std::pow(2.0, i));
        }
        cfg.validate();
        const CostReport rep = cost_report(cfg);
        os << n << ',' << D << ',' << rep.param_count << ',' << rep.macs << ','
           << rep.memory_bytes;
        std::printf("%4d  %4d  %11lld  %12lld  %9.2fMB", n, D, rep.param_count, rep.macs,
                    static_cast<double>(rep.memory_bytes) / (1024.0 * 1024.0));
        if (time_forward) {
          ForecastModel net = ForecastModel::init(cfg, seed);
          auto rng = make_rng(seed, "profile-input");
          std::uniform_real_distribution<double> unit(-1.0, 1.0);
          std::vector<double> xv(static_cast<std::size_t>(cfg.lookback) * cfg.variates);
          for (auto& v : xv) v = unit(rng);
          const Tensor x(Shape{cfg.lookback, cfg.variates}, xv);
          for (int w = 0; w < 2; ++w) (void)model_forward(x, net);  // warmup
          std::vector<double> times;
          for (int r = 0; r < 5; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            (void)model_forward(x, net);
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
          }
          std::sort(times.begin(), times.end());
          os << ',' << fmt_g17(times[2]);
          std::printf("  %10.3f", times[2]);
        }
        os << '\n';
        std::printf("\n");
      }
    }
    ensure_outdir(out);
    write_file_atomic(out + "/profile.csv", os.str());
    return 0;
  }
};

struct SweepCmd {
  ModelFlags model;
  DataFlags data;
  TrainFlags train_flags;
  std::vector<int> n_list = {2, 3, 4, 5, 6};
  std::vector<std::uint64_t> seeds = {0};
  std::string out = "msmamba_out";
  CLI::App* sub = nullptr;

  void attach(CLI::App& app) {
    sub = app.add_subcommand("sweep-scales",
                             "train one model per (scale count, seed); report val MSE");
    sub->set_config("--config", "", "flat key=value flag file (flags override it)");
    model.attach(sub);
    data.attach(sub);
    train_flags.attach(sub);
    sub->add_option("--n-list", n_list, "scale counts to sweep")
        ->delimiter(',')
        ->capture_default_str();
    sub->add_option("--seeds", seeds, "training seeds")->delimiter(',')->capture_default_str();
    sub->add_option("--out", out, "output directory")
        ->envname("MSMAMBA_OUT")
        ->capture_default_str();
  }

  int run() {
    const ModelConfig base = model.resolve();
    std::ostringstream os;
    os << "n,seed,val_mse\n";
    std::cout << "   n        seed     val_mse\n";
    std::vector<std::pair<int, double>> medians;
    for (int n : n_list) {
      std::vector<double> vals;
      for (std::uint64_t seed : seeds) {
        ModelConfig cfg = base;
        cfg.scales = n;
        if (cfg.strategy == StrategyKind::Fixed &&
            static_cast<int>(cfg.alphas.size()) != n) {
          cfg.alphas.clear();
          for (int i = 0; i < n; ++i) cfg.alphas.push_back(std::pow(2.0, i));
        }
        TimeSeriesDataset ds = prepare_train_dataset(data, cfg, seed);
        cfg.variates = ds.variates;
        cfg.validate();
        TrainConfig tc = train_flags.cfg;
        tc.seed = seed;
        ForecastModel net = ForecastModel::init(cfg, seed);
        RunHistory h = train(net, ds, tc);
        vals.push_back(h.best_val);
        os << n << ',' << seed << ',' << fmt_g17(h.best_val) << '\n';
        std::printf("%4d  %10llu  %10.6f\n", n, static_cast<unsigned long long>(seed),
                    h.best_val);
      }
      std::sort(vals.begin(), vals.end());
      const std::size_t m = vals.size();
      const double median =
          m % 2 == 1 ? vals[m / 2] : 0.5 * (vals[m / 2 - 1] + vals[m / 2]);
      medians.emplace_back(n, median);
    }
    for (const auto& [n, med] : medians) {
      os << n << ",median," << fmt_g17(med) << '\n';
      std::printf("%4d      median  %10.6f\n", n, med);
    }
    ensure_outdir(out);
    write_file_atomic(out + "/sweep.csv", os.str());
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-scale selective-SSM time-series forecaster"};
  app.require_subcommand(1);

  TrainCmd train_cmd;
  EvalCmd eval_cmd;
  ForecastCmd forecast_cmd;
  SynthCmd synth_cmd;
  GradcheckCmd gradcheck_cmd;
  ProfileCmd profile_cmd;
  SweepCmd sweep_cmd;

  train_cmd.attach(app);
  eval_cmd.attach(app);
  forecast_cmd.attach(app);
  synth_cmd.attach(app);
  gradcheck_cmd.attach(app);
  profile_cmd.attach(app);
  sweep_cmd.attach(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error code=" << kExitConfig << " kind=config msg=\"" << e.what() << "\"\n";
    return kExitConfig;
  }

  try {
    if (train_cmd.sub->parsed()) return train_cmd.run();
    if (eval_cmd.sub->parsed()) return eval_cmd.run();
    if (forecast_cmd.sub->parsed()) return forecast_cmd.run();
    if (synth_cmd.sub->parsed()) return synth_cmd.run();
    if (gradcheck_cmd.sub->parsed()) return gradcheck_cmd.run();
    if (profile_cmd.sub->parsed()) return profile_cmd.run();
    if (sweep_cmd.sub->parsed()) return sweep_cmd.run();
  } catch (const ConfigError& e) {
    std::cerr << "error code=" << kExitConfig << " kind=config msg=\"" << e.what() << "\"\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    std::cerr << "error code=" << kExitData << " kind=data msg=\"" << e.what() << "\"\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "error code=" << kExitConfig << " kind=config msg=\"" << e.what() << "\"\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "error code=" << kExitNumeric << " kind=numeric msg=\"" << e.what() << "\"\n";
    return kExitNumeric;
  } catch (const DomainError& e) {
    std::cerr << "error code=" << kExitNumeric << " kind=numeric msg=\"" << e.what() << "\"\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error code=1 kind=internal msg=\"" << e.what() << "\"\n";
    return 1;
  }
  return 0;
}
