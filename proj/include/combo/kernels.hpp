#pragma once

// Inner-loop arithmetic kernels. Every kernel has a scalar reference
// implementation and an AVX2+FMA variant; the variant is chosen once at
// startup from CPUID and can be pinned with COMBO_SIMD=scalar|avx2.

#include <cstddef>
#include <string_view>

namespace combo::kernels {

enum class Isa { scalar, avx2 };

std::string_view isa_name(Isa isa);

/// Best instruction set this CPU supports.
Isa detected_isa();

/// Instruction set used by the gemm entry points below.
Isa active_isa();

/// Overrides the active instruction set. Requesting avx2 on a CPU
/// without it falls back to scalar. Not thread-safe; call before work starts.
void set_active_isa(Isa isa);

template <class Real>
struct KernelTable {
  /// sum_i x[i] * y[i]
  Real (*dot)(const Real* x, const Real* y, std::size_t n);
  /// y[i] += a * x[i]
  void (*axpy)(Real a, const Real* x, Real* y, std::size_t n);
  /// y[i] *= a
  void (*scale)(Real a, Real* y, std::size_t n);
  /// c[r * ldc + j] += sum_p a[r * lda + p * inc_a] * b[p * ldb + j] for
  /// r < rows, j < n, with p ascending for every element.
  void (*panel)(const Real* a, std::size_t lda, std::size_t inc_a, const Real* b, std::size_t ldb, Real* c,
                std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n);
};

template <class Real>
const KernelTable<Real>& table(Isa isa);

namespace scalar {
template <class Real> Real dot(const Real* x, const Real* y, std::size_t n);
template <class Real> void axpy(Real a, const Real* x, Real* y, std::size_t n);
template <class Real> void scale(Real a, Real* y, std::size_t n);
template <class Real>
void panel(const Real* a, std::size_t lda, std::size_t inc_a, const Real* b, std::size_t ldb, Real* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n);
}  // namespace scalar

namespace avx2 {
float dot(const float* x, const float* y, std::size_t n);
double dot(const double* x, const double* y, std::size_t n);
void axpy(float a, const float* x, float* y, std::size_t n);
void axpy(double a, const double* x, double* y, std::size_t n);
void scale(float a, float* y, std::size_t n);
void scale(double a, double* y, std::size_t n);
void panel(const float* a, std::size_t lda, std::size_t inc_a, const float* b, std::size_t ldb, float* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n);
void panel(const double* a, std::size_t lda, std::size_t inc_a, const double* b, std::size_t ldb, double* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n);
}  // namespace avx2

// Row-major gemm variants. When accumulate is false, c is overwritten.
// Each output row depends only on the matching row of the left operand,
// so results do not depend on how rows are batched.

/// c[m x n] (+)= a[m x k] * b[k x n]
template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate, Isa isa = active_isa());

/// c[m x n] (+)= a[m x k] * b[n x k]^T
template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate, Isa isa = active_isa());

/// c[m x n] (+)= a[k x m]^T * b[k x n]
template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate, Isa isa = active_isa());

}  // namespace combo::kernels
