#pragma once

// Dense inner-loop kernels. Every kernel has a scalar reference
// implementation; vectorized variants (AVX2+FMA on x86-64, NEON on aarch64)
// are selected once at runtime and must agree with the reference to within
// rounding (see tests/unit/test_simd.cpp).
//
// Set MASR_SIMD=scalar|avx2|neon to force a variant.

#include <cstddef>
#include <span>
#include <string_view>

namespace masr::simd {

enum class Isa { scalar, avx2, neon };

std::string_view to_string(Isa isa);

struct KernelTable {
  Isa isa;
  float (*dot_f32)(const float* a, const float* b, std::size_t n);
  double (*dot_f64)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy_f32)(float alpha, const float* x, float* y, std::size_t n);
  void (*axpy_f64)(double alpha, const double* x, double* y, std::size_t n);
  // sum_i (a_i - b_i)^2
  float (*sqdist_f32)(const float* a, const float* b, std::size_t n);
  double (*sqdist_f64)(const double* a, const double* b, std::size_t n);
};

const KernelTable& scalar_kernels();
// nullptr when the variant is not compiled in or the CPU lacks the feature.
const KernelTable* kernels_for(Isa isa);
Isa best_supported();

const KernelTable& active();
// Throws masr::Error(unsupported) if the variant is unavailable.
void select(Isa isa);

// RAII override, mainly for tests.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa);
  ~ScopedIsa();
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

template <class Real>
Real dot(std::span<const Real> a, std::span<const Real> b);
template <class Real>
void axpy(Real alpha, std::span<const Real> x, std::span<Real> y);
template <class Real>
Real sqdist(std::span<const Real> a, std::span<const Real> b);

template <>
inline float dot<float>(std::span<const float> a, std::span<const float> b) {
  return active().dot_f32(a.data(), b.data(), a.size());
}
template <>
inline double dot<double>(std::span<const double> a, std::span<const double> b) {
  return active().dot_f64(a.data(), b.data(), a.size());
}
template <>
inline void axpy<float>(float alpha, std::span<const float> x, std::span<float> y) {
  active().axpy_f32(alpha, x.data(), y.data(), x.size());
}
template <>
inline void axpy<double>(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy_f64(alpha, x.data(), y.data(), x.size());
}
template <>
inline float sqdist<float>(std::span<const float> a, std::span<const float> b) {
  return active().sqdist_f32(a.data(), b.data(), a.size());
}
template <>
inline double sqdist<double>(std::span<const double> a, std::span<const double> b) {
  return active().sqdist_f64(a.data(), b.data(), a.size());
}

}  // namespace masr::simd
