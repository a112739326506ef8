#include "fedmuscle/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace fedmuscle {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ContractViolation("Matrix: data length " + std::to_string(data_.size()) +
                            " does not match " + std::to_string(rows_) + "x" +
                            std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ContractViolation("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_id(std::uint64_t tag, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = mix64(tag);
  h = mix64(h ^ a);
  h = mix64(h ^ (b + 0x632BE59BD9B4E019ULL));
  h = mix64(h ^ (c + 0x85157AF5D6A2E1B3ULL));
  return h;
}

SeededRng::SeededRng(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), key_(mix64(mix64(seed) ^ stream_id)) {}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t k = counter_++;
  return mix64(key_ ^ mix64(k * 0xD1B54A32D192ED03ULL));
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t SeededRng::below(std::uint64_t n) {
  if (n == 0) throw ContractViolation("SeededRng::below: empty range");
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % n;
}

double SeededRng::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  has_spare_normal_ = true;
  return r * std::cos(theta);
}

// Marsaglia-Tsang; shape < 1 handled by the usual u^(1/shape) boost.
double SeededRng::gamma(double shape) {
  if (!(shape > 0.0)) throw ContractViolation("SeededRng::gamma: shape must be positive");
  if (shape < 1.0) {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0.0;
    double v = 0.0;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<double> SeededRng::dirichlet(std::size_t k, double concentration) {
  std::vector<double> p(k);
  double total = 0.0;
  for (auto& x : p) {
    x = gamma(concentration);
    total += x;
  }
  if (total <= 0.0) {
    // All draws underflowed; fall back to a point mass.
    std::fill(p.begin(), p.end(), 0.0);
    p[below(k)] = 1.0;
    return p;
  }
  for (auto& x : p) x /= total;
  return p;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractViolation("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double log_sum_exp(std::span<const double> values) {
  if (values.empty()) throw ContractViolation("log_sum_exp: empty input");
  const double m = *std::max_element(values.begin(), values.end());
  if (!std::isfinite(m)) throw ContractViolation("log_sum_exp: non-finite input");
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  if (std::isnan(s)) throw ContractViolation("log_sum_exp: non-finite input");
  return m + std::log(s);
}

void softmax(std::span<const double> values, std::span<double> out) {
  if (out.size() != values.size()) throw ContractViolation("softmax: length mismatch");
  const double lse = log_sum_exp(values);
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::exp(values[i] - lse);
}

Normalized l2_normalize(std::span<const double> v) {
  const double n = norm2(v);
  if (!(n >= kNormFloor)) {
    throw DegenerateInput("l2_normalize: norm " + std::to_string(n) + " below floor");
  }
  Normalized out{std::vector<double>(v.begin(), v.end()), n};
  for (auto& x : out.unit) x /= n;
  return out;
}

double det(const Matrix& m) {
  if (m.rows() != m.cols()) throw ContractViolation("det: matrix is not square");
  if (m.rows() > 16) throw ContractViolation("det: dimension above 16");
  const std::size_t n = m.rows();
  Matrix a = m;
  double result = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pivot = k;
    for (std::size_t r = k + 1; r < n; ++r) {
      if (std::abs(a(r, k)) > std::abs(a(pivot, k))) pivot = r;
    }
    if (std::abs(a(pivot, k)) < kPivotFloor) return 0.0;
    if (pivot != k) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(k, c), a(pivot, c));
      result = -result;
    }
    result *= a(k, k);
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a(r, k) / a(k, k);
      for (std::size_t c = k; c < n; ++c) a(r, c) -= f * a(k, c);
    }
  }
  return result;
}

Matrix inverse(const Matrix& m) {
  if (m.rows() != m.cols()) throw ContractViolation("inverse: matrix is not square");
  const std::size_t n = m.rows();
  Matrix a = m;
  Matrix inv = Matrix::identity(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pivot = k;
    for (std::size_t r = k + 1; r < n; ++r) {
      if (std::abs(a(r, k)) > std::abs(a(pivot, k))) pivot = r;
    }
    if (std::abs(a(pivot, k)) < kPivotFloor) throw DegenerateInput("inverse: singular matrix");
    if (pivot != k) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(a(k, c), a(pivot, c));
        std::swap(inv(k, c), inv(pivot, c));
      }
    }
    const double p = a(k, k);
    for (std::size_t c = 0; c < n; ++c) {
      a(k, c) /= p;
      inv(k, c) /= p;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == k) continue;
      const double f = a(r, k);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        a(r, c) -= f * a(k, c);
        inv(r, c) -= f * inv(k, c);
      }
    }
  }
  return inv;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ContractViolation("matmul: inner dimension mismatch");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  }
  return out;
}

Matrix gram(const Matrix& a) {
  Matrix g(a.rows(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = i; j < a.rows(); ++j) {
      g(i, j) = g(j, i) = dot(a.row(i), a.row(j));
    }
  }
  return g;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace fedmuscle
