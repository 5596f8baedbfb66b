#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcc {

// Dense row-major matrix of doubles. Spatial feature maps are stored as
// (pixels x channels) with pixel index y * side + x.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  static Matrix row_vector(std::span<const double> v) {
    Matrix m(1, v.size());
    std::copy(v.begin(), v.end(), m.data.begin());
    return m;
  }
  static Matrix row_vector(std::span<const float> v) {
    Matrix m(1, v.size());
    std::copy(v.begin(), v.end(), m.data.begin());
    return m;
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline std::string shape_str(const Matrix& m) {
  return "(" + std::to_string(m.rows) + "x" + std::to_string(m.cols) + ")";
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

// out = a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a) + " * " +
                                shape_str(b));
  }
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a(i, k);
      if (av == 0.0) continue;
      const double* br = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

// out = a * b^T
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw std::invalid_argument("matmul_nt: dimension mismatch " + shape_str(a) + " * " +
                                shape_str(b) + "^T");
  }
  Matrix out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.data.data() + j * b.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  return out;
}

// out = a^T * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw std::invalid_argument("matmul_tn: dimension mismatch " + shape_str(a) + "^T * " +
                                shape_str(b));
  }
  Matrix out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ar = a.data.data() + k * a.cols;
    const double* br = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.data.data() + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// ab / sqrt(aa * bb), clamped to [-1, 1]. Identical inputs give exactly 1
// since sqrt(x * x) == x in IEEE arithmetic.
inline double cosine_from_sums(double ab, double aa, double bb) {
  const double p = aa * bb;
  const double denom = std::isnormal(p) ? std::sqrt(p) : std::sqrt(aa) * std::sqrt(bb);
  return std::clamp(ab / denom, -1.0, 1.0);
}

inline bool all_finite(const Matrix& m) {
  return std::all_of(m.data.begin(), m.data.end(), [](double v) { return std::isfinite(v); });
}

inline std::size_t side_of(std::size_t pixels) {
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(pixels))));
  if (side * side != pixels) throw std::invalid_argument("feature map is not square");
  return side;
}

// 2x2 average pooling of a (side*side x C) map.
inline Matrix avg_pool2(const Matrix& x) {
  const std::size_t side = side_of(x.rows);
  if (side % 2 != 0) throw std::invalid_argument("avg_pool2: odd side " + std::to_string(side));
  const std::size_t half = side / 2;
  Matrix out(half * half, x.cols);
  for (std::size_t y = 0; y < half; ++y)
    for (std::size_t xx = 0; xx < half; ++xx) {
      auto o = out.row(y * half + xx);
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) {
          auto in = x.row((2 * y + dy) * side + 2 * xx + dx);
          for (std::size_t c = 0; c < x.cols; ++c) o[c] += 0.25 * in[c];
        }
    }
  return out;
}

// Nearest-neighbour 2x upsampling of a (side*side x C) map.
inline Matrix upsample2(const Matrix& x) {
  const std::size_t side = side_of(x.rows);
  const std::size_t big = side * 2;
  Matrix out(big * big, x.cols);
  for (std::size_t y = 0; y < big; ++y)
    for (std::size_t xx = 0; xx < big; ++xx) {
      auto in = x.row((y / 2) * side + xx / 2);
      std::copy(in.begin(), in.end(), out.row(y * big + xx).begin());
    }
  return out;
}

}  // namespace dcc
