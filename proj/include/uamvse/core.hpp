// SPDX-License-Identifier: Apache-2.0
/**
 * @file   core.hpp
 * @brief  Dense float64 matrices, stable softmax/logsumexp kernels and a
 *         seeded counter-based random generator.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uamvse {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (files, manifests, datasets).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf or a numerical check that failed.
class NumericError : public Error {
 public:
  using Error::Error;
};

using Vec = std::vector<double>;

/// Row-major dense matrix of doubles.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, Vec data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw Error("Mat: data length " + std::to_string(data_.size()) +
                  " does not match " + shape_str());
    }
  }
  Mat(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto &r : rows) {
      if (r.size() != cols_) throw Error("Mat: ragged initializer list");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Mat identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  Vec &data() { return data_; }
  const Vec &data() const { return data_; }

  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  bool operator==(const Mat &) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

inline Mat matmul(const Mat &a, const Mat &b) {
  if (a.cols() != b.rows()) {
    throw Error("matmul: dimension mismatch " + a.shape_str() + " x " + b.shape_str());
  }
  Mat out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t p = 0; p < a.cols(); ++p) {
      const double aip = a(i, p);
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

inline Mat transpose(const Mat &a) {
  Mat t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

/// softmax(v / temperature), max-subtracted.
inline Vec softmax_scaled(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw Error("softmax_scaled: temperature must be > 0");
  if (v.empty()) throw Error("softmax_scaled: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - mx) / temperature);
    total += out[i];
  }
  for (double &x : out) x /= total;
  return out;
}

/// Population variance (divides by n).
inline double variance(std::span<const double> v) {
  if (v.size() < 2) throw Error("variance: need at least 2 elements, got " + std::to_string(v.size()));
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return ss / static_cast<double>(v.size());
}

inline double logsumexp(std::span<const double> v) {
  if (v.empty()) throw Error("logsumexp: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Pairwise cosine similarities between rows of x and rows of y.
inline Mat cosine_matrix(const Mat &x, const Mat &y) {
  if (x.cols() != y.cols()) {
    throw Error("cosine_matrix: column mismatch " + x.shape_str() + " vs " + y.shape_str());
  }
  auto norms = [](const Mat &m, const char *name) {
    Vec n(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
      n[r] = l2_norm(m.row(r));
      if (n[r] == 0.0) {
        throw Error(std::string("cosine_matrix: zero-norm row ") + std::to_string(r) + " in " + name);
      }
    }
    return n;
  };
  const Vec nx = norms(x, "x");
  const Vec ny = norms(y, "y");
  Mat out(x.rows(), y.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < y.rows(); ++j) {
      out(i, j) = std::clamp(dot(x.row(i), y.row(j)) / (nx[i] * ny[j]), -1.0, 1.0);
    }
  }
  return out;
}

/**
 * Counter-based generator: output n is splitmix64(seed + n * golden).
 * Integer-only core, so streams are identical across platforms.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t next_u64() { return mix(seed_ + (++counter_) * kGolden); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via the Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  /// Uniform integer in [0, n), n > 0 (Lemire-style rejection).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T> &v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  /// Independent stream derived from this seed and a tag.
  Rng split(std::uint64_t tag) const { return Rng(mix(seed_ ^ mix(tag + kGolden))); }

 private:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  static std::uint64_t mix(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace uamvse
