#include "combo/kernels.hpp"

namespace combo::kernels::scalar {

template <class Real>
Real dot(const Real* x, const Real* y, std::size_t n) {
  Real acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

template <class Real>
void axpy(Real a, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class Real>
void scale(Real a, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] *= a;
}

template <class Real>
void panel(const Real* a, std::size_t lda, std::size_t inc_a, const Real* b, std::size_t ldb, Real* c,
           std::size_t ldc, std::size_t rows, std::size_t k, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    Real* cr = c + r * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const Real ap = a[r * lda + p * inc_a];
      const Real* bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) cr[j] += ap * bp[j];
    }
  }
}

template float dot<float>(const float*, const float*, std::size_t);
template double dot<double>(const double*, const double*, std::size_t);
template void axpy<float>(float, const float*, float*, std::size_t);
template void axpy<double>(double, const double*, double*, std::size_t);
template void scale<float>(float, float*, std::size_t);
template void scale<double>(double, double*, std::size_t);
template void panel<float>(const float*, std::size_t, std::size_t, const float*, std::size_t, float*, std::size_t,
                           std::size_t, std::size_t, std::size_t);
template void panel<double>(const double*, std::size_t, std::size_t, const double*, std::size_t, double*,
                            std::size_t, std::size_t, std::size_t, std::size_t);

}  // namespace combo::kernels::scalar
