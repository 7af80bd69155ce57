/*
 * Copyright 2026 The uwkd Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uwkd/error.hpp"

namespace uwkd {

using Vector = std::vector<double>;

/*
 * Dense row-major matrix. Deliberately minimal: the library only ever needs
 * matrix-vector products, outer-product accumulation and a few
 * factorizations on matrices with at most a few hundred rows/cols.
 */
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorKind::ShapeMismatch,
            "matrix data length " + std::to_string(data_.size()) +
                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix from_rows(const std::vector<Vector>& rows) {
    if (rows.empty()) return {};
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      require(rows[r].size() == m.cols_, ErrorKind::ShapeMismatch,
              "ragged rows in Matrix::from_rows");
      std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(),
                     [](double v) { return std::isfinite(v); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::DimMismatch,
          "dot: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// y = m * x
inline Vector matvec(const Matrix& m, std::span<const double> x) {
  require(m.cols() == x.size(), ErrorKind::DimMismatch,
          "matvec: matrix has " + std::to_string(m.cols()) +
              " cols, vector has " + std::to_string(x.size()));
  Vector y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

inline Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::DimMismatch, "matmul: inner dims differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

// Quadratic form x^T A x.
inline double quadratic_form(const Matrix& a, std::span<const double> x) {
  require(a.rows() == a.cols() && a.cols() == x.size(), ErrorKind::DimMismatch,
          "quadratic_form: matrix " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + ", vector " + std::to_string(x.size()));
  return dot(x, matvec(a, x));
}

// Lowest index wins on ties.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline bool is_symmetric(const Matrix& a, double tol) {
  if (a.rows() != a.cols()) return false;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol) return false;
  return true;
}

/// Lower-triangular L with L L^T = a.
inline Matrix cholesky(const Matrix& a) {
  require(a.rows() == a.cols(), ErrorKind::ShapeMismatch, "cholesky: matrix not square");
  require(is_symmetric(a, 1e-10), ErrorKind::ShapeMismatch, "cholesky: matrix not symmetric");
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) {
      fail(ErrorKind::NotPositiveDefinite,
           "cholesky pivot " + std::to_string(j) + " is " + std::to_string(diag) +
               " (ridge too small?)");
    }
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/*
 * Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
 * ascending. Only used for diagnostics (posterior dumps), so the simple
 * O(n^3)-per-sweep method is adequate for the feature widths involved.
 */
inline Vector symmetric_eigenvalues(Matrix a, int max_sweeps = 100) {
  require(a.rows() == a.cols(), ErrorKind::ShapeMismatch, "eigenvalues: matrix not square");
  const std::size_t n = a.rows();
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  Vector ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

/// Softmax of z / temp, max-shifted.
inline Vector softmax(std::span<const double> z, double temp = 1.0) {
  require(temp > 0.0, ErrorKind::InvalidHyperparameter, "softmax: temperature must be > 0");
  Vector p(z.size());
  if (z.empty()) return p;
  const double zmax = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((z[i] - zmax) / temp);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

inline Vector log_softmax(std::span<const double> z, double temp = 1.0) {
  require(temp > 0.0, ErrorKind::InvalidHyperparameter, "log_softmax: temperature must be > 0");
  Vector out(z.size());
  if (z.empty()) return out;
  const double zmax = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp((v - zmax) / temp);
  const double log_total = std::log(total);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = (z[i] - zmax) / temp - log_total;
  return out;
}

inline void check_distribution(std::span<const double> p, double tol = 1e-9) {
  double total = 0.0;
  for (double v : p) {
    require(std::isfinite(v) && v >= 0.0, ErrorKind::InvalidDistribution,
            "probability entry " + std::to_string(v) + " is negative or non-finite");
    total += v;
  }
  require(!p.empty() && std::abs(total - 1.0) <= tol, ErrorKind::InvalidDistribution,
          "probabilities sum to " + std::to_string(total));
}

/// Shannon entropy in nats; 0 log 0 is taken as 0.
inline double entropy(std::span<const double> p) {
  check_distribution(p);
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::max(h, 0.0);
}

/*
 * Seeded random stream: xoshiro256** with state expanded from the 64-bit seed
 * by splitmix64, exactly as in the reference implementation by Blackman and
 * Vigna. Uniforms take the top 53 bits; normals use Box-Muller with the
 * second variate cached. The integer sequence is platform independent;
 * normal variates additionally depend on the platform's log/sin/cos.
 */
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
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

  /// Uniform in [0, 1).
  double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Lemire's rejection keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, ErrorKind::InvalidHyperparameter, "RngStream::below(0)");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t x = next_u64();
      const __uint128_t m = static_cast<__uint128_t>(x) * n;
      if (static_cast<std::uint64_t>(m) >= threshold)
        return static_cast<std::uint64_t>(m >> 64);
    }
  }

  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    cached_ = radius * std::sin(angle);
    has_cached_ = true;
    return radius * std::cos(angle);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Independent child stream keyed by `key`; the parent is not advanced.
  RngStream split(std::uint64_t key) const {
    std::uint64_t mix = seed_ ^ (0x9E3779B97F4A7C15ULL * (key + 1));
    return RngStream(splitmix64(mix));
  }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  std::uint64_t seed_;
  std::uint64_t state_[4]{};
  double cached_ = 0.0;
  bool has_cached_ = false;
};

/// mean + std * eps with eps i.i.d. standard normal.
inline Vector sample_gaussian(std::span<const double> mean, double std_dev, RngStream& rng) {
  require(std_dev >= 0.0, ErrorKind::InvalidHyperparameter, "sample_gaussian: std must be >= 0");
  Vector out(mean.begin(), mean.end());
  if (std_dev == 0.0) return out;
  for (double& v : out) v += std_dev * rng.normal();
  return out;
}

}  // namespace uwkd
