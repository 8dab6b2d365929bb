#include "msmamba/kernels.hpp"

// AVX2 backend, 4 doubles per lane. Pointwise entries use mul/add (never
// FMA) so each element sees the same two roundings as the scalar loop.
// This translation unit is compiled with -mavx2; dispatch only installs it
// after a runtime CPUID check.

#if defined(__x86_64__) || defined(_M_X64)
#define MSMAMBA_HAVE_AVX2_TU 1
#include <immintrin.h>
#else
#define MSMAMBA_HAVE_AVX2_TU 0
#endif

namespace msmamba::kernels {

#if MSMAMBA_HAVE_AVX2_TU

namespace {

void add_avx2(double* dst, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) dst[i] = a[i] + b[i];
}

void sub_avx2(double* dst, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) dst[i] = a[i] - b[i];
}

void mul_avx2(double* dst, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) dst[i] = a[i] * b[i];
}

void scale_avx2(double* dst, const double* a, double s, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(dst + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vs));
  }
  for (; i < n; ++i) dst[i] = a[i] * s;
}

void axpy_avx2(double* dst, double s, const double* a, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_loadu_pd(dst + i);
    d = _mm256_add_pd(d, _mm256_mul_pd(vs, _mm256_loadu_pd(a + i)));
    _mm256_storeu_pd(dst + i, d);
  }
  for (; i < n; ++i) dst[i] += s * a[i];
}

void muladd_avx2(double* dst, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d d = _mm256_loadu_pd(dst + i);
    d = _mm256_add_pd(d, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    _mm256_storeu_pd(dst + i, d);
  }
  for (; i < n; ++i) dst[i] += a[i] * b[i];
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc = _mm256_add_pd(acc, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  __m128d lo = _mm256_castpd256_pd128(acc);
  __m128d hi = _mm256_extractf128_pd(acc, 1);
  lo = _mm_add_pd(lo, hi);
  double total = _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
  for (; i < n; ++i) total += a[i] * b[i];
  return total;
}

void decay_update_avx2(double* h, const double* a, const double* b, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vh = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(h + i));
    vh = _mm256_add_pd(vh, _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(h + i, vh);
  }
  for (; i < n; ++i) h[i] = a[i] * h[i] + b[i];
}

const Ops kAvx2Ops = {
    add_avx2,  sub_avx2,    mul_avx2, scale_avx2,
    axpy_avx2, muladd_avx2, dot_avx2, decay_update_avx2,
    "avx2",
};

}  // namespace

const Ops* avx2_ops() { return host_has_avx2() ? &kAvx2Ops : nullptr; }

#else

const Ops* avx2_ops() { return nullptr; }

#endif  // MSMAMBA_HAVE_AVX2_TU

}  // namespace msmamba::kernels
