#include "msmamba/ssm.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

namespace msmamba {

namespace {

std::vector<double> uniform_vec(std::mt19937_64& rng, std::int64_t n, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = dist(rng);
  return v;
}

}  // namespace

Tensor init_linear_param(std::mt19937_64& rng, int fan_in, Shape shape) {
  const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  auto n = shape_numel(shape);
  return Tensor::param(std::move(shape), uniform_vec(rng, n, -k, k));
}

DiscreteStep discretize_zoh(double a, double b, double delta) {
  if (!(delta > 0.0)) throw DomainError("discretize_zoh: delta must be positive");
  const double u = delta * a;
  const double a_hat = std::exp(u);
  double b_hat;
  if (std::abs(u) < 1e-6) {
    b_hat = delta * b * (1.0 + 0.5 * u + u * u / 6.0);
  } else {
    b_hat = b * std::expm1(u) / a;
  }
  return {a_hat, b_hat};
}

SsmCore SsmCore::init(int d_inner, int d_state, std::mt19937_64& rng) {
  if (d_inner < 1 || d_state < 1) throw ConfigError("SsmCore: d_inner and d_state must be >= 1");
  SsmCore core;
  // A[i][j] = -(j+1): distinct negative decay rates per state index.
  std::vector<double> a(static_cast<std::size_t>(d_inner) * d_state);
  for (int i = 0; i < d_inner; ++i)
    for (int j = 0; j < d_state; ++j) a[static_cast<std::size_t>(i * d_state + j)] = -(j + 1.0);
  core.a_diag = Tensor::param({d_inner, d_state}, std::move(a));

  core.delta_proj = init_linear_param(rng, d_inner, {d_inner, d_inner});
  // softplus(delta_bias) lands log-uniformly in [1e-3, 1e-1], the usual
  // selective-SSM time-step range.
  std::uniform_real_distribution<double> logdt(std::log(1e-3), std::log(1e-1));
  std::vector<double> db(static_cast<std::size_t>(d_inner));
  for (auto& v : db) {
    const double dt = std::exp(logdt(rng));
    v = std::log(std::expm1(dt));  // inverse softplus
  }
  core.delta_bias = Tensor::param({d_inner}, std::move(db));
  core.b_proj = init_linear_param(rng, d_inner, {d_inner, d_state});
  core.c_proj = init_linear_param(rng, d_inner, {d_inner, d_state});
  core.skip = Tensor::param({d_inner}, std::vector<double>(static_cast<std::size_t>(d_inner), 1.0));
  return core;
}

void SsmCore::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".a", &a_diag});
  out.push_back({prefix + ".delta_proj", &delta_proj});
  out.push_back({prefix + ".delta_bias", &delta_bias});
  out.push_back({prefix + ".b_proj", &b_proj});
  out.push_back({prefix + ".c_proj", &c_proj});
  out.push_back({prefix + ".skip", &skip});
}

SelectiveParams selective_params(const Tensor& x, const SsmCore& core, const Tensor& scale) {
  if (scale.numel() != 1) {
    throw ShapeError("selective_params: scale must be a one-element tensor, got " +
                     shape_str(scale.shape()));
  }
  const double s = scale[0];
  if (!std::isfinite(s) || s <= 0.0) {
    throw DomainError("selective_params: scale must be finite and positive");
  }
  SelectiveParams out;
  out.delta = mul(softplus(add(matmul(x, core.delta_proj), core.delta_bias)), scale);
  out.b_seq = matmul(x, core.b_proj);
  out.c_seq = matmul(x, core.c_proj);
  return out;
}

Tensor selective_scan(const Tensor& x, const SsmCore& core, const Tensor& delta,
                      const Tensor& b_seq, const Tensor& c_seq) {
  return selective_scan_node(x, delta, b_seq, c_seq, core.a_diag, core.skip);
}

std::vector<double> naive_scan_oracle(const std::vector<double>& x,
                                      const std::vector<double>& delta,
                                      const std::vector<double>& b_seq,
                                      const std::vector<double>& c_seq,
                                      const std::vector<double>& a_diag,
                                      const std::vector<double>& skip, int seq, int d_inner,
                                      int d_state) {
  std::vector<double> y(static_cast<std::size_t>(seq) * d_inner, 0.0);
  std::vector<double> h(static_cast<std::size_t>(d_inner) * d_state, 0.0);
  for (int t = 0; t < seq; ++t) {
    for (int i = 0; i < d_inner; ++i) {
      const double dt = delta[static_cast<std::size_t>(t * d_inner + i)];
      const double xti = x[static_cast<std::size_t>(t * d_inner + i)];
      for (int j = 0; j < d_state; ++j) {
        const double a = a_diag[static_cast<std::size_t>(i * d_state + j)];
        const double u = dt * a;
        const double a_hat = std::exp(u);
        double coef;
        if (std::abs(u) < 1e-6) {
          coef = dt * (1.0 + 0.5 * u + u * u / 6.0);
        } else {
          coef = std::expm1(u) / a;
        }
        const double b_hat = coef * b_seq[static_cast<std::size_t>(t * d_state + j)];
        h[static_cast<std::size_t>(i * d_state + j)] =
            a_hat * h[static_cast<std::size_t>(i * d_state + j)] + b_hat * xti;
      }
      double acc = 0.0;
      for (int j = 0; j < d_state; ++j) {
        acc += c_seq[static_cast<std::size_t>(t * d_state + j)] *
               h[static_cast<std::size_t>(i * d_state + j)];
      }
      y[static_cast<std::size_t>(t * d_inner + i)] =
          acc + skip[static_cast<std::size_t>(i)] * xti;
    }
  }
  return y;
}

MambaBlock MambaBlock::init(int d_model, int d_inner, int d_state, int conv_width,
                            std::mt19937_64& rng) {
  if (d_model < 1 || conv_width < 1) {
    throw ConfigError("MambaBlock: d_model and conv_width must be >= 1");
  }
  MambaBlock b;
  b.in_proj_x = init_linear_param(rng, d_model, {d_model, d_inner});
  b.in_proj_z = init_linear_param(rng, d_model, {d_model, d_inner});
  b.conv_w = init_linear_param(rng, conv_width, {conv_width, d_inner});
  b.conv_b = init_linear_param(rng, conv_width, {d_inner});
  b.core = SsmCore::init(d_inner, d_state, rng);
  b.out_proj = init_linear_param(rng, d_inner, {d_inner, d_model});
  b.norm_gain = Tensor::param({d_model}, std::vector<double>(static_cast<std::size_t>(d_model), 1.0));
  return b;
}

void MambaBlock::collect_params(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".in_x", &in_proj_x});
  out.push_back({prefix + ".in_z", &in_proj_z});
  out.push_back({prefix + ".conv_w", &conv_w});
  out.push_back({prefix + ".conv_b", &conv_b});
  core.collect_params(prefix + ".ssm", out);
  out.push_back({prefix + ".out", &out_proj});
  out.push_back({prefix + ".norm_gain", &norm_gain});
}

void MambaBlock::copy_params_from(const MambaBlock& other) {
  in_proj_x.copy_values_from(other.in_proj_x);
  in_proj_z.copy_values_from(other.in_proj_z);
  conv_w.copy_values_from(other.conv_w);
  conv_b.copy_values_from(other.conv_b);
  core.a_diag.copy_values_from(other.core.a_diag);
  core.delta_proj.copy_values_from(other.core.delta_proj);
  core.delta_bias.copy_values_from(other.core.delta_bias);
  core.b_proj.copy_values_from(other.core.b_proj);
  core.c_proj.copy_values_from(other.core.c_proj);
  core.skip.copy_values_from(other.core.skip);
  out_proj.copy_values_from(other.out_proj);
  norm_gain.copy_values_from(other.norm_gain);
}

Tensor mamba_block_forward(const Tensor& e, const MambaBlock& block, const Tensor& scale) {
  if (e.shape().size() != 2 || e.shape()[1] != block.d_model()) {
    throw ShapeError("mamba_block_forward: input " + shape_str(e.shape()) +
                     " does not match block width " + std::to_string(block.d_model()));
  }
  Tensor value = matmul(e, block.in_proj_x);
  Tensor gate = matmul(e, block.in_proj_z);
  Tensor u = silu(causal_depthwise_conv(value, block.conv_w, block.conv_b));
  SelectiveParams sp = selective_params(u, block.core, scale);
  Tensor y = selective_scan(u, block.core, sp.delta, sp.b_seq, sp.c_seq);
  Tensor merged = mul(y, silu(gate));
  Tensor o = matmul(merged, block.out_proj);
  return rms_norm(o, block.norm_gain, 1e-6);
}

void SpectralReport::write_csv(std::ostream& os) const {
  os << "channel,state,delta,magnitude\n";
  char buf[64];
  for (const auto& r : rows) {
    os << r.channel << ',' << r.state << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.delta);
    os << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.magnitude);
    os << buf << '\n';
  }
}

SpectralReport spectral_decay_report(const SsmCore& core, const std::vector<double>& deltas) {
  if (deltas.empty()) throw DomainError("spectral_decay_report: empty delta grid");
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    if (!(deltas[k] > 0.0)) throw DomainError("spectral_decay_report: deltas must be positive");
    if (k > 0 && !(deltas[k] > deltas[k - 1])) {
      throw DomainError("spectral_decay_report: deltas must be sorted ascending");
    }
  }
  SpectralReport rep;
  const int di = core.d_inner(), ds = core.d_state();
  rep.rows.reserve(static_cast<std::size_t>(di) * ds * deltas.size());
  for (int i = 0; i < di; ++i) {
    for (int j = 0; j < ds; ++j) {
      const double a = core.a_diag[i * ds + j];
      for (double d : deltas) {
        rep.rows.push_back({i, j, d, std::abs(std::exp(d * a)), a >= 0.0});
      }
    }
  }
  return rep;
}

}  // namespace msmamba
