#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "masr/matrix.hpp"
#include "masr/rng.hpp"

namespace masr {

// Affine map y = W x + b, W is out x in.
template <class Real>
struct Affine {
  Matrix<Real> w;
  std::vector<Real> b;

  Affine() = default;
  Affine(std::size_t out, std::size_t in) : w(out, in), b(out, Real(0)) {}

  std::size_t in_dim() const { return w.cols(); }
  std::size_t out_dim() const { return w.rows(); }

  void zero() {
    w.fill(Real(0));
    std::fill(b.begin(), b.end(), Real(0));
  }
  // W ~ N(0, 1/in), b = 0.
  void init_gaussian(Rng& rng) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(in_dim()));
    for (Real& x : w.flat()) x = static_cast<Real>(rng.normal() * sd);
    std::fill(b.begin(), b.end(), Real(0));
  }

  friend bool operator==(const Affine&, const Affine&) = default;
};

// Named flat view of one learnable tensor.
template <class Real>
struct TensorRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<Real> data;
};

template <class Real>
using TensorVisitor = std::function<void(const TensorRef<Real>&)>;

template <class Real>
void visit_affine(const std::string& prefix, Affine<Real>& a, const TensorVisitor<Real>& f) {
  f({prefix + ".weight", {a.w.rows(), a.w.cols()}, a.w.flat()});
  f({prefix + ".bias", {a.b.size()}, std::span<Real>(a.b)});
}

}  // namespace masr
