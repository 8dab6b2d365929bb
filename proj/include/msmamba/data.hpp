#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "msmamba/tensor.hpp"

namespace msmamba {

/// Per-variate train-range normalization statistics.
struct NormalizationStats {
  std::vector<std::string> names;
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<bool> clamped;  // true where sigma fell below 1e-8 and was set to 1
  bool empty() const { return mu.empty(); }
  int variates() const { return static_cast<int>(mu.size()); }
};

struct SplitRange {
  std::int64_t begin = 0;
  std::int64_t end = 0;
  std::int64_t size() const { return end - begin; }
};

enum class Split { Train, Val, Test };
const char* to_string(Split s);

/// Aligned multivariate series, chronologically split, optionally
/// standardized against its own train range.
struct TimeSeriesDataset {
  std::vector<double> values;  // [timesteps x variates], row-major
  std::int64_t timesteps = 0;
  int variates = 0;
  std::vector<std::string> names;
  std::string resolution = "unknown";
  SplitRange train, val, test;
  bool split_set = false;
  NormalizationStats stats;
  bool standardized = false;

  double at(std::int64_t t, int d) const {
    return values[static_cast<std::size_t>(t) * static_cast<std::size_t>(variates) +
                  static_cast<std::size_t>(d)];
  }
  const SplitRange& range(Split s) const;
};

/// CSV ingestion: rows are timesteps, optional header row, optional leading
/// timestamp column (dropped when its first data cell does not parse as a
/// number under a detected header). Any other unparsable cell fails with the
/// 1-based file line number.
TimeSeriesDataset load_csv(const std::string& path);

/// Serializes values (header row of variate names) for the synth command.
void write_dataset_csv(const TimeSeriesDataset& ds, const std::string& path);

/// Prefix-train / mid-val / suffix-test boundaries from floor-rounded ratios.
/// Ratios must all be positive and sum to 1 within 1e-9. When min_split_len
/// is given (usually L+T), every split must be able to host one window.
void chronological_split(TimeSeriesDataset& ds, double train_ratio = 0.7,
                         double val_ratio = 0.1, double test_ratio = 0.2,
                         std::int64_t min_split_len = 0);

/// Per-variate (x - mu) / sigma with statistics from the train range only;
/// sigma below 1e-8 is clamped to 1 and flagged.
void standardize(TimeSeriesDataset& ds);
/// Same transform with externally supplied statistics (e.g. a checkpoint's).
void standardize_with(TimeSeriesDataset& ds, const NormalizationStats& stats);
/// Inverse transform restoring the original scale.
void destandardize(TimeSeriesDataset& ds);

struct Window {
  std::int64_t origin = 0;  // inputs cover [origin, origin+L), targets follow
};

/// Grouping of window origins used by the shuffled training loop; targets
/// start exactly L steps after each origin by construction.
struct WindowBatch {
  std::vector<std::int64_t> origins;
};

/// All windows of a split, ordered by origin;
/// count = floor((len - L - T) / stride) + 1.
std::vector<Window> make_windows(const TimeSeriesDataset& ds, Split split, int L, int T,
                                 std::int64_t stride = 1);
Tensor window_input(const TimeSeriesDataset& ds, Window w, int L);
Tensor window_target(const TimeSeriesDataset& ds, Window w, int L, int T);

/// Sum-of-sinusoids generator: variate v is
///   sum_k amplitude[k] * sin(2*pi*t/period[k] + phase(v,k)) + noise,
/// with seeded phases and Gaussian noise; bit-reproducible per spec.
struct SynthSpec {
  std::int64_t length = 1000;
  int variates = 4;
  std::vector<double> periods = {8.0, 64.0};
  std::vector<double> amplitudes = {1.0, 1.0};
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
};

TimeSeriesDataset synth_multiscale(const SynthSpec& spec);

}  // namespace msmamba
