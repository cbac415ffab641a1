#include "combo/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

namespace combo::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(COMBO_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  Isa isa = detected_isa();
  if (const char* env = std::getenv("COMBO_SIMD")) {
    std::string v(env);
    if (v == "scalar") isa = Isa::scalar;
  }
  return isa;
}

Isa& active_slot() {
  static Isa isa = initial_isa();
  return isa;
}

// Rows of the right operand processed per pass in gemm_nn; keeps the
// touched slice of b resident in L2. Per-element summation order is still
// ascending in k, so blocking does not change results.
constexpr std::size_t kBlockK = 256;

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

Isa detected_isa() {
  static const Isa isa = cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
  return isa;
}

Isa active_isa() { return active_slot(); }

void set_active_isa(Isa isa) {
  active_slot() = (isa == Isa::avx2 && detected_isa() != Isa::avx2) ? Isa::scalar : isa;
}

template <>
const KernelTable<float>& table<float>(Isa isa) {
  static const KernelTable<float> s{&scalar::dot<float>, &scalar::axpy<float>, &scalar::scale<float>,
                                    &scalar::panel<float>};
  static const KernelTable<float> v{
      static_cast<float (*)(const float*, const float*, std::size_t)>(&avx2::dot),
      static_cast<void (*)(float, const float*, float*, std::size_t)>(&avx2::axpy),
      static_cast<void (*)(float, float*, std::size_t)>(&avx2::scale),
      static_cast<void (*)(const float*, std::size_t, std::size_t, const float*, std::size_t, float*, std::size_t,
                           std::size_t, std::size_t, std::size_t)>(&avx2::panel)};
  return (isa == Isa::avx2 && detected_isa() == Isa::avx2) ? v : s;
}

template <>
const KernelTable<double>& table<double>(Isa isa) {
  static const KernelTable<double> s{&scalar::dot<double>, &scalar::axpy<double>, &scalar::scale<double>,
                                     &scalar::panel<double>};
  static const KernelTable<double> v{
      static_cast<double (*)(const double*, const double*, std::size_t)>(&avx2::dot),
      static_cast<void (*)(double, const double*, double*, std::size_t)>(&avx2::axpy),
      static_cast<void (*)(double, double*, std::size_t)>(&avx2::scale),
      static_cast<void (*)(const double*, std::size_t, std::size_t, const double*, std::size_t, double*,
                           std::size_t, std::size_t, std::size_t, std::size_t)>(&avx2::panel)};
  return (isa == Isa::avx2 && detected_isa() == Isa::avx2) ? v : s;
}

template <class Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate, Isa isa) {
  const auto& kt = table<Real>(isa);
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  for (std::size_t p0 = 0; p0 < k; p0 += kBlockK) {
    const std::size_t kb = std::min(k, p0 + kBlockK) - p0;
    kt.panel(a + p0, k, 1, b + p0 * n, n, c, n, m, kb, n);
  }
}

template <class Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate, Isa isa) {
  // Transposing b once turns every output row into a row panel.
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c, accumulate, isa);
}

template <class Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c,
             bool accumulate, Isa isa) {
  const auto& kt = table<Real>(isa);
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  for (std::size_t p0 = 0; p0 < k; p0 += kBlockK) {
    const std::size_t kb = std::min(k, p0 + kBlockK) - p0;
    kt.panel(a + p0 * m, 1, m, b + p0 * n, n, c, n, m, kb, n);
  }
}

#define COMBO_INSTANTIATE_GEMM(R)                                                             \
  template void gemm_nn<R>(std::size_t, std::size_t, std::size_t, const R*, const R*, R*, bool, \
                           Isa);                                                              \
  template void gemm_nt<R>(std::size_t, std::size_t, std::size_t, const R*, const R*, R*, bool, \
                           Isa);                                                              \
  template void gemm_tn<R>(std::size_t, std::size_t, std::size_t, const R*, const R*, R*, bool, Isa);

COMBO_INSTANTIATE_GEMM(float)
COMBO_INSTANTIATE_GEMM(double)

#undef COMBO_INSTANTIATE_GEMM

}  // namespace combo::kernels
