#include "msmamba/kernels.hpp"

// Reference backend. Every other backend must reproduce these loops
// rounding-for-rounding on the pointwise entries.

namespace msmamba::kernels {
namespace {

void add_scalar(double* dst, const double* a, const double* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_scalar(double* dst, const double* a, const double* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_scalar(double* dst, const double* a, const double* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_scalar(double* dst, const double* a, double s, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = a[i] * s;
}

void axpy_scalar(double* dst, double s, const double* a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += s * a[i];
}

void muladd_scalar(double* dst, const double* a, const double* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void decay_update_scalar(double* h, const double* a, const double* b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) h[i] = a[i] * h[i] + b[i];
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops = {
      add_scalar,  sub_scalar,    mul_scalar, scale_scalar,
      axpy_scalar, muladd_scalar, dot_scalar, decay_update_scalar,
      "scalar",
  };
  return ops;
}

}  // namespace msmamba::kernels
