#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace tokenmil {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data.data() + r * cols, cols}; }
};

/// out(n x k) = a(n x m) * w(m x k) + bias(k), with w given as a flat row-major span.
inline void affine(const Matrix& a, std::span<const double> w, std::span<const double> bias,
                   std::size_t k, Matrix& out) {
  assert(w.size() == a.cols * k && bias.size() == k);
  out = Matrix(a.rows, k);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) o[j] = bias[j];
    const double* ai = a.data.data() + i * a.cols;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double x = ai[p];
      if (x == 0.0) continue;
      const double* wp = w.data() + p * k;
      for (std::size_t j = 0; j < k; ++j) o[j] += x * wp[j];
    }
  }
}

/// grad_w(m x k) += a^T(m x n) * d(n x k); grad_b(k) += column sums of d.
inline void accumulate_affine_grads(const Matrix& a, const Matrix& d, std::span<double> grad_w,
                                    std::span<double> grad_b) {
  const std::size_t k = d.cols;
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ai = a.data.data() + i * a.cols;
    const double* di = d.data.data() + i * k;
    for (std::size_t p = 0; p < a.cols; ++p) {
      const double x = ai[p];
      if (x == 0.0) continue;
      double* gw = grad_w.data() + p * k;
      for (std::size_t j = 0; j < k; ++j) gw[j] += x * di[j];
    }
    for (std::size_t j = 0; j < k; ++j) grad_b[j] += di[j];
  }
}

/// out(n x m) = d(n x k) * w^T(k x m), w given as m x k row-major.
inline void backprop_input(const Matrix& d, std::span<const double> w, std::size_t m, Matrix& out) {
  const std::size_t k = d.cols;
  std::vector<double> wt(k * m);
  for (std::size_t p = 0; p < m; ++p)
    for (std::size_t j = 0; j < k; ++j) wt[j * m + p] = w[p * k + j];
  out = Matrix(d.rows, m);
  for (std::size_t i = 0; i < d.rows; ++i) {
    const double* di = d.data.data() + i * k;
    double* oi = out.data.data() + i * m;
    for (std::size_t j = 0; j < k; ++j) {
      const double g = di[j];
      if (g == 0.0) continue;
      const double* wj = wt.data() + j * m;
      for (std::size_t p = 0; p < m; ++p) oi[p] += g * wj[p];
    }
  }
}

}  // namespace tokenmil
