// Built with -mavx2 -mfma on x86-64. Only reached after a CPUID check, and
// deliberately free of standard-library templates so no AVX2-compiled
// inline definitions leak into other translation units.

#include "combo/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>

namespace combo::kernels::avx2 {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d high64 = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
}

}  // namespace

float dot(const float* x, const float* y, std::size_t n) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i + 8), _mm256_loadu_ps(y + i + 8), acc1);
  }
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i), acc0);
  }
  float acc = hsum(_mm256_add_ps(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

double dot(const double* x, const double* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void axpy(double a, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void scale(float a, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_mul_ps(va, _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] *= a;
}

void scale(double a, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] *= a;
}

namespace {

// R rows of c held in registers, 16 floats (or 8 doubles) per pass over k.
template <int R>
inline void panel_rows(const float* a, std::size_t lda, std::size_t inc_a, const float* b, std::size_t ldb, float* c,
                       std::size_t ldc, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256 acc[R][2];
    for (int r = 0; r < R; ++r) {
      acc[r][0] = _mm256_loadu_ps(c + r * ldc + j);
      acc[r][1] = _mm256_loadu_ps(c + r * ldc + j + 8);
    }
    for (std::size_t p = 0; p < k; ++p) {
      const __m256 b0 = _mm256_loadu_ps(b + p * ldb + j);
      const __m256 b1 = _mm256_loadu_ps(b + p * ldb + j + 8);
      for (int r = 0; r < R; ++r) {
        const __m256 ar = _mm256_set1_ps(a[r * lda + p * inc_a]);
        acc[r][0] = _mm256_fmadd_ps(ar, b0, acc[r][0]);
        acc[r][1] = _mm256_fmadd_ps(ar, b1, acc[r][1]);
      }
    }
    for (int r = 0; r < R; ++r) {
      _mm256_storeu_ps(c + r * ldc + j, acc[r][0]);
      _mm256_storeu_ps(c + r * ldc + j + 8, acc[r][1]);
    }
  }
  for (; j + 8 <= n; j += 8) {
    __m256 acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_loadu_ps(c + r * ldc + j);
    for (std::size_t p = 0; p < k; ++p) {
      const __m256 b0 = _mm256_loadu_ps(b + p * ldb + j);
      for (int r = 0; r < R; ++r) acc[r] = _mm256_fmadd_ps(_mm256_set1_ps(a[r * lda + p * inc_a]), b0, acc[r]);
    }
    for (int r = 0; r < R; ++r) _mm256_storeu_ps(c + r * ldc + j, acc[r]);
  }
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      float acc = c[r * ldc + j];
      for (std::size_t p = 0; p < k; ++p) acc = __builtin_fmaf(a[r * lda + p * inc_a], b[p * ldb + j], acc);
      c[r * ldc + j] = acc;
    }
  }
}

template <int R>
inline void panel_rows(const double* a, std::size_t lda, std::size_t inc_a, const double* b, std::size_t ldb,
                       double* c, std::size_t ldc, std::size_t k, std::size_t n) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256d acc[R][2];
    for (int r = 0; r < R; ++r) {
      acc[r][0] = _mm256_loadu_pd(c + r * ldc + j);
      acc[r][1] = _mm256_loadu_pd(c + r * ldc + j + 4);
    }
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
      const __m256d b1 = _mm256_loadu_pd(b + p * ldb + j + 4);
      for (int r = 0; r < R; ++r) {
        const __m256d ar = _mm256_set1_pd(a[r * lda + p * inc_a]);
        acc[r][0] = _mm256_fmadd_pd(ar, b0, acc[r][0]);
        acc[r][1] = _mm256_fmadd_pd(ar, b1, acc[r][1]);
      }
    }
    for (int r = 0; r < R; ++r) {
      _mm256_storeu_pd(c + r * ldc + j, acc[r][0]);
      _mm256_storeu_pd(c + r * ldc + j + 4, acc[r][1]);
    }
  }
  for (; j + 4 <= n; j += 4) {
    __m256d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_loadu_pd(c + r * ldc + j);
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
      for (int r = 0; r < R; ++r) acc[r] = _mm256_fmadd_pd(_mm256_set1_pd(a[r * lda + p * inc_a]), b0, acc[r]);
    }
    for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + r * ldc + j, acc[r]);
  }
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      double acc = c[r * ldc + j];
      for (std::size_t p = 0; p < k; ++p) acc = __builtin_fma(a[r * lda + p * inc_a], b[p * ldb + j], acc);
      c[r * ldc + j] = acc;
    }
  }
}

template <class Real>
inline void panel_any(const Real* a, std::size_t lda, std::size_t inc_a, const Real* b, std::size_t ldb, Real* c,
                      std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n) {
  std::size_t r = 0;
  for (; r + 4 <= rows; r += 4) panel_rows<4>(a + r * lda, lda, inc_a, b, ldb, c + r * ldc, ldc, k, n);
  switch (rows - r) {
    case 3: panel_rows<3>(a + r * lda, lda, inc_a, b, ldb, c + r * ldc, ldc, k, n); break;
    case 2: panel_rows<2>(a + r * lda, lda, inc_a, b, ldb, c + r * ldc, ldc, k, n); break;
    case 1: panel_rows<1>(a + r * lda, lda, inc_a, b, ldb, c + r * ldc, ldc, k, n); break;
    default: break;
  }
}

}  // namespace

void panel(const float* a, std::size_t lda, std::size_t inc_a, const float* b, std::size_t ldb, float* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n) {
  panel_any(a, lda, inc_a, b, ldb, c, ldc, rows, k, n);
}

void panel(const double* a, std::size_t lda, std::size_t inc_a, const double* b, std::size_t ldb, double* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n) {
  panel_any(a, lda, inc_a, b, ldb, c, ldc, rows, k, n);
}

}  // namespace combo::kernels::avx2

#else

// Non-x86 or no AVX2 compiler support: the avx2 entry points alias the
// scalar reference so the dispatch table stays well-formed.
namespace combo::kernels::avx2 {
float dot(const float* x, const float* y, std::size_t n) { return scalar::dot(x, y, n); }
double dot(const double* x, const double* y, std::size_t n) { return scalar::dot(x, y, n); }
void axpy(float a, const float* x, float* y, std::size_t n) { scalar::axpy(a, x, y, n); }
void axpy(double a, const double* x, double* y, std::size_t n) { scalar::axpy(a, x, y, n); }
void scale(float a, float* y, std::size_t n) { scalar::scale(a, y, n); }
void scale(double a, double* y, std::size_t n) { scalar::scale(a, y, n); }
void panel(const float* a, std::size_t lda, std::size_t inc_a, const float* b, std::size_t ldb, float* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n) {
  scalar::panel(a, lda, inc_a, b, ldb, c, ldc, rows, k, n);
}
void panel(const double* a, std::size_t lda, std::size_t inc_a, const double* b, std::size_t ldb, double* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n) {
  scalar::panel(a, lda, inc_a, b, ldb, c, ldc, rows, k, n);
}
}  // namespace combo::kernels::avx2

#endif
