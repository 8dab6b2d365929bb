#include "msmamba/checkpoint.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "msmamba/io_util.hpp"

namespace msmamba {

namespace {

std::string join_csv(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += ',';
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::string alphas_str(const std::vector<double>& alphas) {
  std::string out;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    if (i) out += ',';
    out += fmt_g17(alphas[i]);
  }
  return out;
}

double parse_double_strict(const std::string& tok, const char* what) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw ParseError(std::string("checkpoint: bad ") + what + " value '" + tok + "'");
  }
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, ForecastModel& model,
                     const NormalizationStats& stats) {
  const ModelConfig& c = model.config;
  std::ostringstream os;
  os << kCheckpointMagic << '\n';
  os << "config lookback " << c.lookback << '\n';
  os << "config horizon " << c.horizon << '\n';
  os << "config variates " << c.variates << '\n';
  os << "config d_embed " << c.d_embed << '\n';
  os << "config depth " << c.depth << '\n';
  os << "config scales " << c.scales << '\n';
  os << "config strategy " << to_string(c.strategy) << '\n';
  os << "config alphas " << alphas_str(c.alphas) << '\n';
  os << "config dynamic_hidden " << c.dynamic_hidden << '\n';
  os << "config d_state " << c.d_state << '\n';
  os << "config conv_width " << c.conv_width << '\n';
  os << "config expansion " << c.expansion << '\n';
  os << "config bidirectional " << (c.bidirectional ? 1 : 0) << '\n';
  os << "config ffn_hidden " << c.ffn_hidden << '\n';
  os << "config residual " << (c.residual ? 1 : 0) << '\n';

  os << "stats " << stats.variates() << '\n';
  if (!stats.empty()) {
    os << "names " << join_csv(stats.names) << '\n';
    os << "mu";
    for (double v : stats.mu) os << ' ' << fmt_hex(v);
    os << '\n';
    os << "sigma";
    for (double v : stats.sigma) os << ' ' << fmt_hex(v);
    os << '\n';
    os << "clamped";
    for (bool b : stats.clamped) os << ' ' << (b ? 1 : 0);
    os << '\n';
  }

  for (auto& np : model.parameters()) {
    const Tensor& t = *np.tensor;
    os << "param " << np.name << ' ' << t.shape().size();
    for (int e : t.shape()) os << ' ' << e;
    os << '\n';
    auto vals = t.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      os << fmt_hex(vals[i]);
      os << ((i % 8 == 7 || i + 1 == vals.size()) ? '\n' : ' ');
    }
  }
  os << "end\n";
  write_file_atomic(path, os.str());
}

ForecastModel load_checkpoint(const std::string& path, NormalizationStats* stats_out) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open checkpoint '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) {
    throw ParseError("'" + path + "' is not a " + std::string(kCheckpointMagic) + " file");
  }

  ModelConfig cfg;
  cfg.alphas.clear();
  NormalizationStats stats;
  std::string word;

  // config block
  while (is >> word) {
    if (word != "config") break;
    std::string key;
    is >> key;
    if (key == "strategy") {
      std::string v;
      is >> v;
      cfg.strategy = strategy_kind_from(v);
    } else if (key == "alphas") {
      std::string v;
      is >> v;
      cfg.alphas.clear();
      for (const auto& tok : split_csv(v)) cfg.alphas.push_back(parse_double_strict(tok, "alpha"));
    } else {
      long long v = 0;
      if (!(is >> v)) throw ParseError("checkpoint: bad value for config key '" + key + "'");
      if (key == "lookback") cfg.lookback = static_cast<int>(v);
      else if (key == "horizon") cfg.horizon = static_cast<int>(v);
      else if (key == "variates") cfg.variates = static_cast<int>(v);
      else if (key == "d_embed") cfg.d_embed = static_cast<int>(v);
      else if (key == "depth") cfg.depth = static_cast<int>(v);
      else if (key == "scales") cfg.scales = static_cast<int>(v);
      else if (key == "dynamic_hidden") cfg.dynamic_hidden = static_cast<int>(v);
      else if (key == "d_state") cfg.d_state = static_cast<int>(v);
      else if (key == "conv_width") cfg.conv_width = static_cast<int>(v);
      else if (key == "expansion") cfg.expansion = static_cast<int>(v);
      else if (key == "bidirectional") cfg.bidirectional = v != 0;
      else if (key == "ffn_hidden") cfg.ffn_hidden = static_cast<int>(v);
      else if (key == "residual") cfg.residual = v != 0;
      else throw ParseError("checkpoint: unknown config key '" + key + "'");
    }
  }

  if (word != "stats") throw ParseError("checkpoint: expected stats block");
  int nstats = 0;
  is >> nstats;
  if (nstats > 0) {
    std::string key;
    is >> key;
    if (key != "names") throw ParseError("checkpoint: expected names");
    std::string names_line;
    std::getline(is, names_line);
    if (!names_line.empty() && names_line[0] == ' ') names_line.erase(0, 1);
    stats.names = split_csv(names_line);
    if (static_cast<int>(stats.names.size()) != nstats) {
      throw ParseError("checkpoint: stats name count mismatch");
    }
    auto read_row = [&](const char* tag, std::vector<double>& dst) {
      is >> key;
      if (key != tag) throw ParseError(std::string("checkpoint: expected ") + tag);
      dst.resize(static_cast<std::size_t>(nstats));
      for (auto& v : dst) {
        std::string tok;
        if (!(is >> tok)) throw ParseError("checkpoint: truncated stats");
        v = parse_double_strict(tok, tag);
      }
    };
    read_row("mu", stats.mu);
    read_row("sigma", stats.sigma);
    is >> key;
    if (key != "clamped") throw ParseError("checkpoint: expected clamped");
    stats.clamped.resize(static_cast<std::size_t>(nstats));
    for (int i = 0; i < nstats; ++i) {
      int b = 0;
      is >> b;
      stats.clamped[static_cast<std::size_t>(i)] = b != 0;
    }
  }

  ForecastModel model = ForecastModel::init(cfg, 0);
  auto params = model.parameters();
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& np : params) by_name[np.name] = np.tensor;
  std::size_t filled = 0;

  while (is >> word) {
    if (word == "end") break;
    if (word != "param") throw ParseError("checkpoint: expected param record, got '" + word + "'");
    std::string name;
    std::size_t rank = 0;
    is >> name >> rank;
    Shape shape(rank);
    for (auto& e : shape) is >> e;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("checkpoint: unknown parameter '" + name + "'");
    Tensor& t = *it->second;
    if (t.shape() != shape) {
      throw ParseError("checkpoint: parameter '" + name + "' has shape " + shape_str(shape) +
                       ", model expects " + shape_str(t.shape()));
    }
    auto vals = t.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      std::string tok;
      if (!(is >> tok)) throw ParseError("checkpoint: truncated values for '" + name + "'");
      vals[i] = parse_double_strict(tok, "param");
    }
    ++filled;
  }
  if (word != "end") throw ParseError("checkpoint: missing end marker");
  if (filled != params.size()) {
    throw ParseError("checkpoint: " + std::to_string(filled) + " of " +
                     std::to_string(params.size()) + " parameters present");
  }
  if (stats_out) *stats_out = std::move(stats);
  return model;
}

}  // namespace msmamba
