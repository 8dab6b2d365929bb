#include "msmamba/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <sstream>

#include "msmamba/io_util.hpp"
#include "msmamba/rng.hpp"

namespace msmamba {

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

const SplitRange& TimeSeriesDataset::range(Split s) const {
  if (!split_set) throw ConfigError("dataset has no split boundaries");
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    default: return test;
  }
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

bool parse_double(const std::string& cell, double& out) {
  const std::string t = trim(cell);
  if (t.empty()) return false;
  const char* begin = t.data();
  const char* end = begin + t.size();
  auto res = std::from_chars(begin, end, out);
  return res.ec == std::errc() && res.ptr == end;
}

}  // namespace

TimeSeriesDataset load_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open '" + path + "'");

  TimeSeriesDataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool has_header = false;
  bool drop_first_col = false;
  std::vector<std::string> header;
  std::vector<double> row;

  // First non-empty line decides the schema: all-numeric means data.
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    bool all_numeric = true;
    double v;
    for (const auto& c : cells) {
      if (!parse_double(c, v)) {
        all_numeric = false;
        break;
      }
    }
    if (all_numeric) {
      ds.variates = static_cast<int>(cells.size());
      for (const auto& c : cells) {
        parse_double(c, v);
        ds.values.push_back(v);
      }
    } else {
      has_header = true;
      header = cells;
    }
    break;
  }
  if (!is && ds.values.empty() && !has_header) throw ParseError("'" + path + "' is empty");

  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto cells = split_line(line);
    if (has_header && ds.values.empty() && ds.variates == 0) {
      // First data row under a header: a non-numeric leading cell marks a
      // timestamp column.
      if (cells.size() != header.size()) {
        throw ParseError("'" + path + "': row " + std::to_string(lineno) + " has " +
                         std::to_string(cells.size()) + " cells, header has " +
                         std::to_string(header.size()));
      }
      double v;
      if (!parse_double(cells[0], v)) drop_first_col = true;
      ds.variates = static_cast<int>(cells.size()) - (drop_first_col ? 1 : 0);
      if (ds.variates < 1) throw ParseError("'" + path + "' has no numeric columns");
    }
    const std::size_t expected =
        static_cast<std::size_t>(ds.variates) + (drop_first_col ? 1u : 0u);
    if (ds.variates != 0 && cells.size() != expected) {
      throw ParseError("'" + path + "': row " + std::to_string(lineno) + " has " +
                       std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(expected));
    }
    for (std::size_t c = drop_first_col ? 1 : 0; c < cells.size(); ++c) {
      double v;
      if (!parse_double(cells[c], v)) {
        throw ParseError("'" + path + "': cell '" + trim(cells[c]) + "' at row " +
                         std::to_string(lineno) + " is not numeric");
      }
      ds.values.push_back(v);
    }
  }

  if (ds.variates == 0 || ds.values.empty()) {
    throw ParseError("'" + path + "' contains no data rows");
  }
  ds.timesteps = static_cast<std::int64_t>(ds.values.size()) / ds.variates;

  if (has_header) {
    ds.names.assign(header.begin() + (drop_first_col ? 1 : 0), header.end());
    for (auto& n : ds.names) n = trim(n);
  } else {
    for (int d = 0; d < ds.variates; ++d) ds.names.push_back("v" + std::to_string(d + 1));
  }
  return ds;
}

void write_dataset_csv(const TimeSeriesDataset& ds, const std::string& path) {
  std::ostringstream os;
  for (int d = 0; d < ds.variates; ++d) {
    if (d) os << ',';
    os << ds.names[static_cast<std::size_t>(d)];
  }
  os << '\n';
  for (std::int64_t t = 0; t < ds.timesteps; ++t) {
    for (int d = 0; d < ds.variates; ++d) {
      if (d) os << ',';
      os << fmt_g17(ds.at(t, d));
    }
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

void chronological_split(TimeSeriesDataset& ds, double train_ratio, double val_ratio,
                         double test_ratio, std::int64_t min_split_len) {
  if (!(train_ratio > 0.0) || !(val_ratio > 0.0) || !(test_ratio > 0.0)) {
    throw ConfigError("split ratios must all be positive");
  }
  if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
  const auto n = ds.timesteps;
  // The 1e-6 nudge absorbs representation error in the cumulative ratios
  // (0.7+0.1 is slightly below 0.8) without ever crossing a true boundary.
  const auto train_end =
      static_cast<std::int64_t>(std::floor(train_ratio * static_cast<double>(n) + 1e-6));
  const auto val_end = static_cast<std::int64_t>(
      std::floor((train_ratio + val_ratio) * static_cast<double>(n) + 1e-6));
  ds.train = {0, train_end};
  ds.val = {train_end, val_end};
  ds.test = {val_end, n};
  ds.split_set = true;
  if (min_split_len > 0) {
    for (Split s : {Split::Train, Split::Val, Split::Test}) {
      if (ds.range(s).size() < min_split_len) {
        throw ConfigError(std::string(to_string(s)) + " split holds " +
                          std::to_string(ds.range(s).size()) + " steps; at least " +
                          std::to_string(min_split_len) + " are needed for one window");
      }
    }
  }
}

void standardize(TimeSeriesDataset& ds) {
  if (!ds.split_set) throw ConfigError("standardize: split boundaries must be set first");
  if (ds.standardized) throw ConfigError("standardize: dataset is already standardized");
  NormalizationStats st;
  st.names = ds.names;
  st.mu.resize(static_cast<std::size_t>(ds.variates));
  st.sigma.resize(static_cast<std::size_t>(ds.variates));
  st.clamped.assign(static_cast<std::size_t>(ds.variates), false);
  const auto n = ds.train.size();
  for (int d = 0; d < ds.variates; ++d) {
    double mu = 0.0;
    for (std::int64_t t = ds.train.begin; t < ds.train.end; ++t) mu += ds.at(t, d);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::int64_t t = ds.train.begin; t < ds.train.end; ++t) {
      const double c = ds.at(t, d) - mu;
      var += c * c;
    }
    double sigma = std::sqrt(var / static_cast<double>(n));
    if (sigma < 1e-8) {
      sigma = 1.0;
      st.clamped[static_cast<std::size_t>(d)] = true;
    }
    st.mu[static_cast<std::size_t>(d)] = mu;
    st.sigma[static_cast<std::size_t>(d)] = sigma;
  }
  standardize_with(ds, st);
}

void standardize_with(TimeSeriesDataset& ds, const NormalizationStats& stats) {
  if (stats.variates() != ds.variates) {
    throw ConfigError("standardize: stats cover " + std::to_string(stats.variates()) +
                      " variates, dataset has " + std::to_string(ds.variates));
  }
  if (ds.standardized) throw ConfigError("standardize: dataset is already standardized");
  for (std::int64_t t = 0; t < ds.timesteps; ++t) {
    for (int d = 0; d < ds.variates; ++d) {
      auto& v = ds.values[static_cast<std::size_t>(t) * ds.variates + d];
      v = (v - stats.mu[static_cast<std::size_t>(d)]) / stats.sigma[static_cast<std::size_t>(d)];
    }
  }
  ds.stats = stats;
  ds.standardized = true;
}

void destandardize(TimeSeriesDataset& ds) {
  if (!ds.standardized) throw ConfigError("destandardize: dataset is not standardized");
  for (std::int64_t t = 0; t < ds.timesteps; ++t) {
    for (int d = 0; d < ds.variates; ++d) {
      auto& v = ds.values[static_cast<std::size_t>(t) * ds.variates + d];
      v = v * ds.stats.sigma[static_cast<std::size_t>(d)] + ds.stats.mu[static_cast<std::size_t>(d)];
    }
  }
  ds.standardized = false;
}

std::vector<Window> make_windows(const TimeSeriesDataset& ds, Split split, int L, int T,
                                 std::int64_t stride) {
  if (L < 1 || T < 1) throw ConfigError("make_windows: L and T must be >= 1");
  if (stride < 1) throw ConfigError("make_windows: stride must be >= 1");
  const auto& r = ds.range(split);
  const std::int64_t len = r.size();
  if (len < L + T) {
    throw ConfigError(std::string(to_string(split)) + " split holds " + std::to_string(len) +
                      " steps; at least " + std::to_string(L + T) + " are needed for one window");
  }
  const std::int64_t count = (len - L - T) / stride + 1;
  std::vector<Window> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t k = 0; k < count; ++k) out.push_back({r.begin + k * stride});
  return out;
}

Tensor window_input(const TimeSeriesDataset& ds, Window w, int L) {
  std::vector<double> v(static_cast<std::size_t>(L) * ds.variates);
  std::copy_n(ds.values.begin() + w.origin * ds.variates, v.size(), v.begin());
  return Tensor({L, ds.variates}, std::move(v));
}

Tensor window_target(const TimeSeriesDataset& ds, Window w, int L, int T) {
  std::vector<double> v(static_cast<std::size_t>(T) * ds.variates);
  std::copy_n(ds.values.begin() + (w.origin + L) * ds.variates, v.size(), v.begin());
  return Tensor({T, ds.variates}, std::move(v));
}

TimeSeriesDataset synth_multiscale(const SynthSpec& spec) {
  if (spec.length < 1 || spec.variates < 1) {
    throw ConfigError("synth: length and variates must be >= 1");
  }
  if (spec.periods.empty() || spec.periods.size() != spec.amplitudes.size()) {
    throw ConfigError("synth: need matching non-empty period and amplitude lists");
  }
  for (std::size_t i = 0; i < spec.periods.size(); ++i) {
    if (!(spec.periods[i] > 0.0)) throw ConfigError("synth: periods must be positive");
    for (std::size_t j = i + 1; j < spec.periods.size(); ++j) {
      if (spec.periods[i] == spec.periods[j]) throw ConfigError("synth: periods must be distinct");
    }
  }
  if (spec.noise_sigma < 0.0) throw ConfigError("synth: noise sigma must be >= 0");

  auto phase_rng = make_rng(spec.seed, "synth-phase");
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  // phase(variate, component), drawn variate-major.
  std::vector<double> phases(static_cast<std::size_t>(spec.variates) * spec.periods.size());
  for (auto& p : phases) p = phase_dist(phase_rng);

  auto noise_rng = make_rng(spec.seed, "synth-noise");
  std::normal_distribution<double> gauss(0.0, 1.0);

  TimeSeriesDataset ds;
  ds.timesteps = spec.length;
  ds.variates = spec.variates;
  ds.resolution = "synthetic";
  ds.values.resize(static_cast<std::size_t>(spec.length) * spec.variates);
  for (std::int64_t t = 0; t < spec.length; ++t) {
    for (int v = 0; v < spec.variates; ++v) {
      double x = 0.0;
      for (std::size_t k = 0; k < spec.periods.size(); ++k) {
        const double ph = phases[static_cast<std::size_t>(v) * spec.periods.size() + k];
        x += spec.amplitudes[k] *
             std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / spec.periods[k] + ph);
      }
      if (spec.noise_sigma > 0.0) x += spec.noise_sigma * gauss(noise_rng);
      ds.values[static_cast<std::size_t>(t) * spec.variates + v] = x;
    }
  }
  for (int d = 0; d < spec.variates; ++d) ds.names.push_back("v" + std::to_string(d + 1));
  return ds;
}

}  // namespace msmamba
