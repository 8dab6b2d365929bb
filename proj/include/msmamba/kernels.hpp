#pragma once

#include <cstddef>
#include <string_view>

namespace msmamba::kernels {

/// Raw vector primitives underneath the tensor ops and the selective scan.
/// Each backend fills one table; dispatch picks the widest ISA the host
/// supports at startup (override with MSMAMBA_KERNELS=scalar|avx2).
///
/// Pointwise entries (add/sub/mul/scale/axpy/decay_update) are bit-identical
/// across backends: every lane performs the same roundings as the scalar
/// loop (the build disables FP contraction). dot reduces in a different
/// order per backend and is only equal up to accumulation rounding.
struct Ops {
  void (*add)(double* dst, const double* a, const double* b, std::size_t n);
  void (*sub)(double* dst, const double* a, const double* b, std::size_t n);
  void (*mul)(double* dst, const double* a, const double* b, std::size_t n);
  void (*scale)(double* dst, const double* a, double s, std::size_t n);
  // dst[i] += s * a[i]
  void (*axpy)(double* dst, double s, const double* a, std::size_t n);
  // dst[i] += a[i] * b[i]
  void (*muladd)(double* dst, const double* a, const double* b, std::size_t n);
  double (*dot)(const double* a, const double* b, std::size_t n);
  // h[i] = a[i] * h[i] + b[i]; the state update of the selective scan.
  void (*decay_update)(double* h, const double* a, const double* b, std::size_t n);
  const char* name;
};

const Ops& active();
std::string_view active_name();

bool host_has_avx2();

/// Force a backend by name ("scalar" or "avx2"). Throws std::runtime_error
/// for an unknown name or one the host cannot execute. Intended for tests
/// and the CLI; not thread-safe against concurrent kernel calls.
void force_backend(std::string_view name);

const Ops& scalar_ops();
/// Null when the build has no AVX2 translation unit or the host lacks AVX2.
const Ops* avx2_ops();

}  // namespace msmamba::kernels
