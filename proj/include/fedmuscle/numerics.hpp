#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fedmuscle {

/// A precondition of a public operation was violated by the caller.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input is well-formed but numerically degenerate (e.g. a zero vector).
class DegenerateInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid experiment or world configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kNormFloor = 1e-12;
inline constexpr double kPivotFloor = 1e-12;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  static Matrix identity(std::size_t n);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Counter-based generator: draw k of stream (seed, stream_id) is a pure
/// function of (seed, stream_id, k), so streams can be created in any order.
class SeededRng {
 public:
  SeededRng(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double gamma(double shape);
  std::vector<double> dirichlet(std::size_t k, double concentration);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

/// Derives a stream id from a phase tag and up to three coordinates.
std::uint64_t stream_id(std::uint64_t tag, std::uint64_t a = 0, std::uint64_t b = 0,
                        std::uint64_t c = 0);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

/// log(sum(exp(v))) evaluated as m + log(sum(exp(v - m))).
double log_sum_exp(std::span<const double> values);

/// Softmax of `values` written into `out` (same length).
void softmax(std::span<const double> values, std::span<double> out);

struct Normalized {
  std::vector<double> unit;
  double norm = 0.0;
};

/// Throws DegenerateInput when the norm is below kNormFloor.
Normalized l2_normalize(std::span<const double> v);

/// Determinant via partial-pivot LU; exactly 0 once a pivot falls below kPivotFloor.
double det(const Matrix& m);

/// Inverse of a small non-singular square matrix (Gauss-Jordan, partial pivot).
Matrix inverse(const Matrix& m);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
/// a · aᵀ
Matrix gram(const Matrix& a);

bool all_finite(std::span<const double> values);

}  // namespace fedmuscle
