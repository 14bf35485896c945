#include "kernels.hpp"

namespace masr::simd::detail {
namespace {

template <class Real>
Real dot_ref(const Real* a, const Real* b, std::size_t n) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <class Real>
void axpy_ref(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class Real>
Real sqdist_ref(const Real* a, const Real* b, std::size_t n) {
  Real s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

const KernelTable kScalarTable{
    Isa::scalar,        dot_ref<float>,    dot_ref<double>,    axpy_ref<float>,
    axpy_ref<double>,   sqdist_ref<float>, sqdist_ref<double>,
};

}  // namespace masr::simd::detail
