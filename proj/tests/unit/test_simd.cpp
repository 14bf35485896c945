#include <cmath>
#include <vector>

#include "doctest.h"
#include "masr/error.hpp"
#include "masr/matrix.hpp"
#include "masr/rng.hpp"
#include "masr/simd.hpp"

using namespace masr;
using namespace masr::simd;

namespace {

std::vector<const KernelTable*> available_tables() {
  std::vector<const KernelTable*> out;
  for (Isa isa : {Isa::avx2, Isa::neon})
    if (const KernelTable* t = kernels_for(isa)) out.push_back(t);
  return out;
}

template <class Real>
std::vector<Real> draw(Rng& rng, std::size_t n) {
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(rng.normal());
  return v;
}

// Bound on the difference of two summation orders: n * eps * sum |a_i b_i|.
template <class Real>
double reorder_bound(const std::vector<Real>& a, const std::vector<Real>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(double(a[i]) * double(b[i]));
  return 2.0 * static_cast<double>(a.size() + 1) * std::numeric_limits<Real>::epsilon() * s + 1e-300;
}

}  // namespace

TEST_CASE("scalar kernels match plain loops exactly") {
  const KernelTable& s = scalar_kernels();
  Rng rng(3);
  for (std::size_t n : {0u, 1u, 5u, 17u, 64u}) {
    auto a = draw<double>(rng, n);
    auto b = draw<double>(rng, n);
    double dot = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dot += a[i] * b[i];
      sq += (a[i] - b[i]) * (a[i] - b[i]);
    }
    CHECK(s.dot_f64(a.data(), b.data(), n) == dot);
    CHECK(s.sqdist_f64(a.data(), b.data(), n) == sq);
    auto y = b;
    s.axpy_f64(0.25, a.data(), y.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y[i] == b[i] + 0.25 * a[i]);
  }
}

TEST_CASE("vector kernels agree with the scalar reference") {
  const auto tables = available_tables();
  if (tables.empty()) {
    MESSAGE("no vector kernels on this host; only the scalar path is exercised");
    return;
  }
  const KernelTable& ref = scalar_kernels();
  Rng rng(11);
  for (const KernelTable* t : tables) {
    CAPTURE(to_string(t->isa));
    for (std::size_t n = 0; n <= 70; ++n) {
      CAPTURE(n);
      auto af = draw<float>(rng, n), bf = draw<float>(rng, n);
      auto ad = draw<double>(rng, n), bd = draw<double>(rng, n);

      CHECK(std::fabs(double(t->dot_f32(af.data(), bf.data(), n)) - double(ref.dot_f32(af.data(), bf.data(), n))) <=
            reorder_bound(af, bf));
      CHECK(std::fabs(t->dot_f64(ad.data(), bd.data(), n) - ref.dot_f64(ad.data(), bd.data(), n)) <=
            reorder_bound(ad, bd));

      std::vector<float> df(n);
      std::vector<double> dd(n);
      for (std::size_t i = 0; i < n; ++i) {
        df[i] = af[i] - bf[i];
        dd[i] = ad[i] - bd[i];
      }
      CHECK(std::fabs(double(t->sqdist_f32(af.data(), bf.data(), n)) -
                      double(ref.sqdist_f32(af.data(), bf.data(), n))) <= reorder_bound(df, df));
      CHECK(std::fabs(t->sqdist_f64(ad.data(), bd.data(), n) - ref.sqdist_f64(ad.data(), bd.data(), n)) <=
            reorder_bound(dd, dd));

      // axpy is element-wise; fused multiply-add may differ by one rounding.
      auto yf = bf, yf_ref = bf;
      t->axpy_f32(0.75f, af.data(), yf.data(), n);
      ref.axpy_f32(0.75f, af.data(), yf_ref.data(), n);
      for (std::size_t i = 0; i < n; ++i)
        CHECK(std::fabs(yf[i] - yf_ref[i]) <= 2.0f * std::numeric_limits<float>::epsilon() * (std::fabs(yf_ref[i]) + 1.0f));
      auto yd = bd, yd_ref = bd;
      t->axpy_f64(-1.5, ad.data(), yd.data(), n);
      ref.axpy_f64(-1.5, ad.data(), yd_ref.data(), n);
      for (std::size_t i = 0; i < n; ++i)
        CHECK(std::fabs(yd[i] - yd_ref[i]) <= 2.0 * std::numeric_limits<double>::epsilon() * (std::fabs(yd_ref[i]) + 1.0));
    }
  }
}

TEST_CASE("runtime selection and scoped override") {
  const Isa before = active().isa;
  {
    ScopedIsa s(Isa::scalar);
    CHECK(active().isa == Isa::scalar);
    const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
    CHECK(dot<double>(a, b) == 32.0);
    CHECK(sqdist<double>(a, b) == 27.0);
  }
  CHECK(active().isa == before);
  CHECK(kernels_for(best_supported()) != nullptr);
  for (Isa isa : {Isa::avx2, Isa::neon})
    if (!kernels_for(isa)) CHECK_THROWS_AS(select(isa), Error);
}

TEST_CASE("linalg helpers under every variant") {
  Rng rng(5);
  Matrix<double> w(3, 9);
  for (auto& x : w.flat()) x = rng.normal();
  const std::vector<double> b{0.5, -1.0, 2.0};
  std::vector<double> x(9);
  for (auto& v : x) v = rng.normal();

  std::vector<double> expect(3);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = b[r];
    for (std::size_t c = 0; c < 9; ++c) s += w(r, c) * x[c];
    expect[r] = s;
  }
  std::vector<Isa> isas{Isa::scalar};
  for (Isa isa : {Isa::avx2, Isa::neon})
    if (kernels_for(isa)) isas.push_back(isa);
  for (Isa isa : isas) {
    ScopedIsa s(isa);
    std::vector<double> y(3);
    linalg::affine<double>(w, b, x, y);
    for (std::size_t r = 0; r < 3; ++r) CHECK(y[r] == doctest::Approx(expect[r]).epsilon(1e-14));
  }
}
