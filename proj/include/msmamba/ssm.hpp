#pragma once

#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "msmamba/tensor.hpp"

namespace msmamba {

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

/// Trainable weight drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensor init_linear_param(std::mt19937_64& rng, int fan_in, Shape shape);

/// One scalar step of the zero-order-hold discretization.
struct DiscreteStep {
  double a_hat;
  double b_hat;
};

/// a_hat = exp(delta*a); b_hat = (exp(delta*a)-1)/a * b, evaluated as a
/// series when |delta*a| < 1e-6. delta must be positive.
DiscreteStep discretize_zoh(double a, double b, double delta);

/// Learnable parameters of one selective state-space core. A is diagonal,
/// stored per (channel, state) pair, strictly negative at initialization.
struct SsmCore {
  Tensor a_diag;      // [d_inner x d_state]
  Tensor delta_proj;  // [d_inner x d_inner]
  Tensor delta_bias;  // [d_inner]
  Tensor b_proj;      // [d_inner x d_state]
  Tensor c_proj;      // [d_inner x d_state]
  Tensor skip;        // [d_inner]

  int d_inner() const { return a_diag.shape()[0]; }
  int d_state() const { return a_diag.shape()[1]; }

  static SsmCore init(int d_inner, int d_state, std::mt19937_64& rng);
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
};

struct SelectiveParams {
  Tensor delta;  // [seq x d_inner], strictly positive
  Tensor b_seq;  // [seq x d_state]
  Tensor c_seq;  // [seq x d_state]
};

/// Input-dependent discretization controls:
///   delta = scale * softplus(x @ delta_proj + delta_bias),
///   b_seq = x @ b_proj, c_seq = x @ c_proj.
/// scale is a one-element tensor (traced when the scale is learnable).
SelectiveParams selective_params(const Tensor& x, const SsmCore& core, const Tensor& scale);

/// The sequential selective recurrence over x [seq x d_inner]; h starts at 0.
Tensor selective_scan(const Tensor& x, const SsmCore& core, const Tensor& delta,
                      const Tensor& b_seq, const Tensor& c_seq);

/// Reference recurrence for testing selective_scan: the same math as the
/// plainest possible per-timestep loop, sharing no code with the scan node
/// (no kernels, no tape). Row-major buffers, sizes as named.
std::vector<double> naive_scan_oracle(const std::vector<double>& x,
                                      const std::vector<double>& delta,
                                      const std::vector<double>& b_seq,
                                      const std::vector<double>& c_seq,
                                      const std::vector<double>& a_diag,
                                      const std::vector<double>& skip, int seq, int d_inner,
                                      int d_state);

/// One Mamba block operating on [tokens x d_model] embeddings. The pipeline:
/// input projection to (value, gate) -> causal depthwise conv -> silu ->
/// selective scan -> silu-gated merge -> output projection -> RMS norm.
struct MambaBlock {
  Tensor in_proj_x;  // [d_model x d_inner]
  Tensor in_proj_z;  // [d_model x d_inner]
  Tensor conv_w;     // [conv_width x d_inner]
  Tensor conv_b;     // [d_inner]
  SsmCore core;
  Tensor out_proj;   // [d_inner x d_model]
  Tensor norm_gain;  // [d_model]

  int d_model() const { return in_proj_x.shape()[0]; }
  int d_inner() const { return in_proj_x.shape()[1]; }

  static MambaBlock init(int d_model, int d_inner, int d_state, int conv_width,
                         std::mt19937_64& rng);
  void collect_params(const std::string& prefix, std::vector<NamedParam>& out);
  void copy_params_from(const MambaBlock& other);
};

Tensor mamba_block_forward(const Tensor& e, const MambaBlock& block, const Tensor& scale);

/// |exp(delta * a)| per (channel, state, delta); rows grouped by channel and
/// state, deltas innermost. Non-negative diagonal entries are flagged, not
/// fatal.
struct SpectralRow {
  int channel;
  int state;
  double delta;
  double magnitude;
  bool a_nonnegative;
};

struct SpectralReport {
  std::vector<SpectralRow> rows;
  void write_csv(std::ostream& os) const;  // columns channel,state,delta,magnitude
};

/// deltas must be positive and sorted ascending.
SpectralReport spectral_decay_report(const SsmCore& core, const std::vector<double>& deltas);

}  // namespace msmamba
