#pragma once

// Dense row-major matrices, stable softmax / log-sum-exp, and the seeded
// generator every stochastic stage draws from.
//
// Generator: xoshiro256** (Blackman & Vigna), state seeded by expanding the
// 64-bit seed with splitmix64. The raw 64-bit stream is fully specified by
// integer arithmetic and therefore identical on every platform. Derived draws:
//   uniform()         (next() >> 11) * 2^-53, in [0, 1)
//   uniform_index(n)  rejection sampling on next() % n, unbiased
//   normal()          Box-Muller on two uniforms, cosine branch only

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xfersv/errors.hpp"

namespace xfersv {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ShapeError("matrix value count " + std::to_string(values_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    values_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      values_.insert(values_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Matrix& operator+=(const Matrix& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }

  Matrix& operator*=(double s) {
    for (double& v : values_) v *= s;
    return *this;
  }

  // this += s * other
  void add_scaled(const Matrix& other, double s) {
    require_same_shape(other, "add_scaled");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * other.values_[i];
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  void require_same_shape(const Matrix& other, const char* op) const {
    if (!same_shape(other)) {
      throw ShapeError(std::string("shape mismatch in ") + op + ": " + shape_string() +
                       " vs " + other.shape_string());
    }
  }

 public:
  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " * " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double aij = a(i, j);
      if (aij == 0.0) continue;
      auto b_row = b.row(j);
      for (std::size_t k = 0; k < b.cols(); ++k) out_row[k] += aij * b_row[k];
    }
  }
  return out;
}

// a^T * b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto a_row = a.row(r);
    auto b_row = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a_row[i];
      if (ari == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t k = 0; k < b.cols(); ++k) out_row[k] += ari * b_row[k];
    }
  }
  return out;
}

// a * b^T without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t k = 0; k < b.rows(); ++k) {
      auto b_row = b.row(k);
      double acc = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) acc += a_row[j] * b_row[j];
      out(i, k) = acc;
    }
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// x * x^T, symmetrized as (G + G^T) / 2.
inline Matrix gram(const Matrix& x) {
  if (x.rows() == 0) throw ShapeError("gram: empty batch");
  Matrix g = matmul_nt(x, x);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = i + 1; j < g.cols(); ++j) {
      const double s = 0.5 * (g(i, j) + g(j, i));
      g(i, j) = s;
      g(j, i) = s;
    }
  }
  return g;
}

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("log_sum_exp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

inline Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax: empty input");
  const double m = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    total += p[i];
  }
  for (double& x : p) x /= total;
  return p;
}

// Row-wise softmax of a B x C matrix.
inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    Vector p = softmax(logits.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return out;
}

inline Vector l2_normalize(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n > 0.0)) throw DegenerateInputError("l2_normalize: zero-norm vector");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// FNV-1a, 64-bit. Used for content hashes and seed derivation.
inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const unsigned char>(
      reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}

// Seed for a named stage, derived from the root seed.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) {
  std::uint64_t state = root ^ fnv1a64(stage);
  return splitmix64(state);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t next() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::size_t uniform_index(std::size_t n) {
    if (n == 0) throw ParameterError("uniform_index: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t x = next();
      if (x >= threshold) return static_cast<std::size_t>(x % bound);
    }
  }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[uniform_index(i)]);
    }
  }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
};

inline Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.normal(0.0, stddev);
  return m;
}

}  // namespace xfersv
