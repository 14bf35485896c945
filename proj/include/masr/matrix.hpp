#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "masr/simd.hpp"

namespace masr {

// Row-major dense matrix with value semantics.
template <class Real>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<Real> flat() { return data_; }
  std::span<const Real> flat() const { return data_; }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

namespace linalg {

// y = W x + b
template <class Real>
void affine(const Matrix<Real>& w, std::span<const Real> b, std::span<const Real> x, std::span<Real> y) {
  assert(x.size() == w.cols() && y.size() == w.rows() && b.size() == w.rows());
  for (std::size_t r = 0; r < w.rows(); ++r) y[r] = b[r] + simd::dot<Real>(w.row(r), x);
}

// dx += W^T g
template <class Real>
void affine_backward_input(const Matrix<Real>& w, std::span<const Real> g, std::span<Real> dx) {
  for (std::size_t r = 0; r < w.rows(); ++r)
    if (g[r] != Real(0)) simd::axpy<Real>(g[r], w.row(r), dx);
}

// dW += g x^T, db += g
template <class Real>
void affine_backward_params(std::span<const Real> g, std::span<const Real> x, Matrix<Real>& dw, std::span<Real> db) {
  for (std::size_t r = 0; r < dw.rows(); ++r) {
    db[r] += g[r];
    if (g[r] != Real(0)) simd::axpy<Real>(g[r], x, dw.row(r));
  }
}

template <class Real>
Real norm(std::span<const Real> x) {
  using std::sqrt;
  return sqrt(simd::dot<Real>(x, x));
}

}  // namespace linalg
}  // namespace masr
