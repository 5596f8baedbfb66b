#pragma once

// Shared fixtures: seeded generators, synthetic images, temp directories.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dcc/dcc.hpp"

namespace testing_support {

using dcc::Image;
using dcc::Matrix;

// Seeded generator for property tests.
struct Gen {
  std::mt19937_64 engine;
  explicit Gen(std::uint64_t seed) : engine(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine); }
  bool coin() { return integer(0, 1) == 1; }

  std::vector<double> vec(std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * normal();
    return v;
  }
  Matrix mat(std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (auto& x : m.data) x = scale * normal();
    return m;
  }
  std::vector<std::size_t> distinct_indices(std::size_t count, std::size_t n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    std::shuffle(all.begin(), all.end(), engine);
    all.resize(count);
    return all;
  }
};

// Round face on a coloured background, eyes as dark dots.
inline Image face_image(int size = 32, float hue = 0.0f) {
  Image img(size, size, 3);
  const double c = size / 2.0 - 0.5;
  const double r = size * 0.32;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool face = std::hypot(x - c, y - (c - 1)) < r;
      img.at(x, y, 0) = face ? 0.85f : 0.2f + hue;
      img.at(x, y, 1) = face ? 0.65f : 0.3f + 0.01f * static_cast<float>(x % 16);
      img.at(x, y, 2) = face ? 0.5f : 0.7f - hue;
      const bool eye = (std::abs(x - size * 0.36) < 1.5 || std::abs(x - size * 0.64) < 1.5) && std::abs(y - size * 0.36) < 1.5;
      if (eye)
        for (int k = 0; k < 3; ++k) img.at(x, y, k) = 0.05f;
    }
  return img;
}

// Binary map of the face disc of face_image (white = face).
inline Image face_region(int size = 32) {
  Image img(size, size, 1);
  const double c = size / 2.0 - 0.5;
  const double r = size * 0.32;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.at(x, y, 0) = std::hypot(x - c, y - (c - 1)) < r ? 1.0f : 0.0f;
  return img;
}

inline Image line_sketch(int size, int column) {
  Image img(size, size, 1);
  for (int y = 0; y < size; ++y) img.at(column, y, 0) = 1.0f;
  return img;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("dcc-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& s) const { return path / s; }
};

inline bool bit_equal(const Matrix& a, const Matrix& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

// Central finite difference of f at x[i].
template <class F>
double central_difference(F&& f, std::vector<double>& x, std::size_t i, double h) {
  const double saved = x[i];
  x[i] = saved + h;
  const double up = f();
  x[i] = saved - h;
  const double down = f();
  x[i] = saved;
  return (up - down) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing_support
