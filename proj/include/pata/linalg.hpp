#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace pata::linalg {

/// Dense row-major matrix. Only what the toy transformer needs.
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}

  double& operator()(int r, int c) noexcept { return v[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const noexcept { return v[static_cast<std::size_t>(r) * cols + c]; }
  double* row(int r) noexcept { return v.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const noexcept { return v.data() + static_cast<std::size_t>(r) * cols; }
};

/// C = A * B (+ bias broadcast over rows when given).
inline Mat matmul(const Mat& a, const Mat& b, const std::vector<double>* bias = nullptr) {
  Mat c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    double* ci = c.row(i);
    if (bias) {
      for (int j = 0; j < b.cols; ++j) ci[j] = (*bias)[j];
    }
    const double* ai = a.row(i);
    for (int k = 0; k < a.cols; ++k) {
      const double aik = ai[k];
      const double* bk = b.row(k);
      for (int j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

/// C = A * B^T
inline Mat matmul_nt(const Mat& a, const Mat& b) {
  Mat c(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i) {
    const double* ai = a.row(i);
    for (int j = 0; j < b.rows; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (int k = 0; k < a.cols; ++k) s += ai[k] * bj[k];
      c(i, j) = s;
    }
  }
  return c;
}

/// C = A^T * B
inline Mat matmul_tn(const Mat& a, const Mat& b) {
  Mat c(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k) {
    const double* ak = a.row(k);
    const double* bk = b.row(k);
    for (int i = 0; i < a.cols; ++i) {
      const double aki = ak[i];
      double* ci = c.row(i);
      for (int j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
    }
  }
  return c;
}

inline void add_inplace(Mat& a, const Mat& b) noexcept {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

/// Per-row layer normalization with affine parameters. Keeps what backward needs.
struct LayerNormCache {
  Mat xhat;
  std::vector<double> inv_std;
};

inline Mat layer_norm(const Mat& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                      LayerNormCache& cache, double eps = 1e-5) {
  Mat y(x.rows, x.cols);
  cache.xhat = Mat(x.rows, x.cols);
  cache.inv_std.assign(static_cast<std::size_t>(x.rows), 0.0);
  for (int i = 0; i < x.rows; ++i) {
    const double* xi = x.row(i);
    double mean = 0.0;
    for (int j = 0; j < x.cols; ++j) mean += xi[j];
    mean /= x.cols;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= x.cols;
    const double r = 1.0 / std::sqrt(var + eps);
    cache.inv_std[static_cast<std::size_t>(i)] = r;
    for (int j = 0; j < x.cols; ++j) {
      const double xh = (xi[j] - mean) * r;
      cache.xhat(i, j) = xh;
      y(i, j) = gamma[static_cast<std::size_t>(j)] * xh + beta[static_cast<std::size_t>(j)];
    }
  }
  return y;
}

inline Mat layer_norm_backward(const Mat& dy, const std::vector<double>& gamma, const LayerNormCache& cache) {
  Mat dx(dy.rows, dy.cols);
  const int n = dy.cols;
  for (int i = 0; i < dy.rows; ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (int j = 0; j < n; ++j) {
      const double dxh = dy(i, j) * gamma[static_cast<std::size_t>(j)];
      mean_d += dxh;
      mean_dx += dxh * cache.xhat(i, j);
    }
    mean_d /= n;
    mean_dx /= n;
    const double r = cache.inv_std[static_cast<std::size_t>(i)];
    for (int j = 0; j < n; ++j) {
      const double dxh = dy(i, j) * gamma[static_cast<std::size_t>(j)];
      dx(i, j) = r * (dxh - mean_d - cache.xhat(i, j) * mean_dx);
    }
  }
  return dx;
}

// tanh approximation of GELU
inline double gelu(double z) noexcept {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * z * (1.0 + std::tanh(c * (z + 0.044715 * z * z * z)));
}

inline double gelu_grad(double z) noexcept {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (z + 0.044715 * z * z * z));
  return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * z * z);
}

}  // namespace pata::linalg
