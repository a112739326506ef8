#pragma once

// Reference implementations used only by the tests. They favour directness
// over speed and deliberately avoid calling the library's loss code.

#include "fedmuscle/numerics.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using fedmuscle::Matrix;

inline double dotp(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  double s = 0.0;
  for (std::size_t e = 0; e < a.cols(); ++e) s += a(i, e) * b(j, e);
  return s;
}

/// -1/B sum_i log softmax_i of (z_i . y_j / tau) over j.
inline double infonce(const Matrix& z, const Matrix& y, double tau) {
  const std::size_t b = z.rows();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double den = 0.0;
    for (std::size_t j = 0; j < b; ++j) den += std::exp(dotp(z, i, y, j) / tau);
    total -= std::log(std::exp(dotp(z, i, y, i) / tau) / den);
  }
  return total / static_cast<double>(b);
}

/// Enumerates every tuple (j_1..j_M) with nested counters and evaluates the
/// weighted softmax directly. `others[m]` is the m-th selected user's batch,
/// `tau[m]` its temperature with the anchor, gamma a scalar for all pairs.
inline double muscle(const Matrix& anchor, const std::vector<Matrix>& others,
                     const std::vector<double>& tau, double gamma) {
  const std::size_t b = anchor.rows();
  const std::size_t m = others.size();
  std::size_t rows = 1;
  for (std::size_t k = 0; k < m; ++k) rows *= b;
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double num = 0.0, den = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<std::size_t> j(m);
      for (std::size_t k = 0, rest = r; k < m; ++k) {
        j[m - 1 - k] = rest % b;
        rest /= b;
      }
      double cross = 0.0;
      for (std::size_t p = 0; p < m; ++p) {
        for (std::size_t q = 0; q < m; ++q) {
          if (p != q) cross += gamma * dotp(others[p], j[p], others[q], j[q]);
        }
      }
      double sim = 0.0;
      for (std::size_t p = 0; p < m; ++p) sim += dotp(anchor, i, others[p], j[p]) / tau[p];
      const double term = std::exp(-0.5 * cross + sim);
      den += term;
      bool positive = true;
      for (auto v : j) positive = positive && v == i;
      if (positive) num = term;
    }
    total -= std::log(num / den);
  }
  return total / static_cast<double>(b);
}

/// Determinant by cofactor expansion along the first row.
inline double cofactor_det(const Matrix& a) {
  const std::size_t n = a.rows();
  if (n == 1) return a(0, 0);
  double s = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    Matrix minor(n - 1, n - 1);
    for (std::size_t r = 1; r < n; ++r) {
      for (std::size_t k = 0, mc = 0; k < n; ++k) {
        if (k != c) minor(r - 1, mc++) = a(r, k);
      }
    }
    s += (c % 2 == 0 ? 1.0 : -1.0) * a(0, c) * cofactor_det(minor);
  }
  return s;
}

inline double volume(const std::vector<const double*>& rows, std::size_t d) {
  Matrix g(rows.size(), rows.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < rows.size(); ++b) {
      double s = 0.0;
      for (std::size_t e = 0; e < d; ++e) s += rows[a][e] * rows[b][e];
      g(a, b) = s;
    }
  }
  return std::sqrt(std::max(cofactor_det(g), 0.0));
}

/// Volume loss with all B-1 negatives: candidates c are the tuples
/// (z_i, y^1_c, .., y^M_c); logit = -Vol / tau; positive c = i.
inline double gramian(const Matrix& anchor, const std::vector<Matrix>& others, double tau) {
  const std::size_t b = anchor.rows();
  const std::size_t d = anchor.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    double den = 0.0, num = 0.0;
    for (std::size_t c = 0; c < b; ++c) {
      std::vector<const double*> rows{anchor.row(i).data()};
      for (const auto& o : others) rows.push_back(o.row(c).data());
      const double t = std::exp(-volume(rows, d) / tau);
      den += t;
      if (c == i) num = t;
    }
    total -= std::log(num / den);
  }
  return total / static_cast<double>(b);
}

/// Scalar Adam/AdamW reference recursion.
struct ScalarAdamW {
  double lr, beta1, beta2, eps, wd;
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double p, double g) {
    ++t;
    p -= lr * wd * p;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mh = m / (1.0 - std::pow(beta1, t));
    const double vh = v / (1.0 - std::pow(beta2, t));
    return p - lr * mh / (std::sqrt(vh) + eps);
  }
};

template <typename F>
std::vector<double> central_diff(std::vector<double>& x, F&& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    const double up = f();
    x[k] = keep - h;
    const double down = f();
    x[k] = keep;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff = std::max(diff, std::abs(a[k] - n[k]));
    scale = std::max(scale, std::abs(n[k]));
  }
  return diff / std::max(scale, 1e-12);
}

}  // namespace oracle
