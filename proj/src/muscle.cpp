#include "fedmuscle/muscle.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <string>

namespace fedmuscle {

namespace {

void check_positive_symmetric(const Matrix& t, const char* what) {
  if (t.rows() != t.cols()) throw ContractViolation(std::string(what) + ": table is not square");
  for (std::size_t a = 0; a < t.rows(); ++a) {
    for (std::size_t b = 0; b < t.cols(); ++b) {
      if (!(t(a, b) > 0.0)) {
        throw ContractViolation(std::string(what) + ": non-positive temperature at (" +
                                std::to_string(a) + "," + std::to_string(b) + ")");
      }
      if (t(a, b) != t(b, a)) {
        throw ContractViolation(std::string(what) + ": table is not symmetric");
      }
    }
  }
}

Matrix lower_temperatures(const Matrix& tau_high, std::size_t anchor_index) {
  const std::size_t k = tau_high.rows();
  Matrix out(k - 1, k - 1);
  std::size_t oa = 0;
  for (std::size_t a = 0; a < k; ++a) {
    if (a == anchor_index) continue;
    std::size_t ob = 0;
    for (std::size_t b = 0; b < k; ++b) {
      if (b == anchor_index) continue;
      const double inv = 1.0 / tau_high(a, b) +
                         1.0 / (tau_high(a, anchor_index) * tau_high(b, anchor_index));
      out(oa, ob) = 1.0 / inv;
      ++ob;
    }
    ++oa;
  }
  return out;
}

const RepresentationBatch& batch_of(std::span<const RepresentationBatch> reps, UserId user) {
  if (user >= reps.size() || reps[user].empty()) {
    throw ContractViolation("missing representation batch for user " + std::to_string(user));
  }
  return reps[user];
}

void check_tuple(std::span<const RepresentationBatch> reps, const TupleIndex& tuple) {
  if (tuple.indices.size() != tuple.selected_users.size()) {
    throw ContractViolation("TupleIndex: one index per selected user required");
  }
  for (std::size_t m = 0; m < tuple.indices.size(); ++m) {
    const auto& z = batch_of(reps, tuple.selected_users[m]);
    if (tuple.indices[m] >= z.rows()) throw ContractViolation("TupleIndex: index out of range");
  }
}

void check_anchor_shape(const RepresentationBatch& anchor, const AggregatePackage& pkg) {
  if (anchor.rows() != pkg.batch_size) {
    throw ContractViolation("muscle: anchor batch has " + std::to_string(anchor.rows()) +
                            " rows, package expects " + std::to_string(pkg.batch_size));
  }
  if (anchor.cols() != pkg.dim()) throw ContractViolation("muscle: dimension mismatch");
  if (pkg.row_count() != pkg.log_alpha.size()) {
    throw ContractViolation("muscle: package rows and alpha length differ");
  }
}

std::vector<UserId> sorted_members(std::span<const UserId> members) {
  std::vector<UserId> out(members.begin(), members.end());
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw ContractViolation("selected users must be distinct");
  }
  return out;
}

}  // namespace

TemperatureSchedule TemperatureSchedule::uniform(std::size_t n_users, double tau_high,
                                                 double tau_low, LowTemperatureMode mode) {
  return {Matrix(n_users, n_users, tau_high), Matrix(n_users, n_users, tau_low), mode};
}

TemperatureTable TemperatureSchedule::table_for(UserId anchor,
                                                std::span<const UserId> selected) const {
  TemperatureTable t;
  t.anchor = anchor;
  t.members = sorted_members(selected);
  if (std::find(t.members.begin(), t.members.end(), anchor) != t.members.end()) {
    throw ContractViolation("anchor may not be among the selected users");
  }
  const std::size_t m = t.members.size();
  if (m == 0) throw ContractViolation("at least one selected user required");
  for (UserId u : t.members) {
    if (u >= tau_high.rows()) throw ContractViolation("user id outside temperature schedule");
  }
  if (anchor >= tau_high.rows()) throw ContractViolation("anchor outside temperature schedule");

  t.k_eff = m + 1;
  std::vector<UserId> order{anchor};
  order.insert(order.end(), t.members.begin(), t.members.end());
  t.tau_high = Matrix(m + 1, m + 1);
  for (std::size_t a = 0; a <= m; ++a) {
    for (std::size_t b = 0; b <= m; ++b) t.tau_high(a, b) = tau_high(order[a], order[b]);
  }
  check_positive_symmetric(t.tau_high, "table_for");

  if (mode == LowTemperatureMode::derived) {
    t.tau_low = m >= 2 ? derive_lower_temperatures(t.tau_high, 0) : lower_temperatures(t.tau_high, 0);
  } else {
    t.tau_low = Matrix(m, m);
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t b = 0; b < m; ++b) t.tau_low(a, b) = tau_low(t.members[a], t.members[b]);
    }
  }
  Matrix members_high(m, m);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) members_high(a, b) = t.tau_high(a + 1, b + 1);
  }
  t.gamma = compute_gamma(members_high, t.tau_low);
  return t;
}

Matrix derive_lower_temperatures(const Matrix& tau_high, std::size_t anchor_index) {
  check_positive_symmetric(tau_high, "derive_lower_temperatures");
  if (tau_high.rows() < 3) {
    throw ContractViolation("derive_lower_temperatures: ensemble size must be at least 3");
  }
  if (anchor_index >= tau_high.rows()) {
    throw ContractViolation("derive_lower_temperatures: anchor index out of range");
  }
  return lower_temperatures(tau_high, anchor_index);
}

Matrix compute_gamma(const Matrix& tau_high, const Matrix& tau_low) {
  if (!tau_high.same_shape(tau_low)) throw ContractViolation("compute_gamma: shape mismatch");
  check_positive_symmetric(tau_high, "compute_gamma");
  check_positive_symmetric(tau_low, "compute_gamma");
  Matrix g(tau_high.rows(), tau_high.cols());
  static std::atomic<bool> warned{false};
  for (std::size_t a = 0; a < g.rows(); ++a) {
    for (std::size_t b = 0; b < g.cols(); ++b) {
      g(a, b) = 1.0 / tau_low(a, b) - 1.0 / tau_high(a, b);
      if (a != b && !(g(a, b) >= 0.0) && !warned.exchange(true)) {
        std::cerr << "warning: negative gamma " << g(a, b) << " at (" << a << "," << b
                  << "); tau_low should not exceed tau_high\n";
      }
    }
  }
  return g;
}

double compute_log_alpha(std::span<const RepresentationBatch> reps, const TupleIndex& tuple,
                         const Matrix& gamma) {
  check_tuple(reps, tuple);
  const std::size_t m = tuple.selected_users.size();
  if (gamma.rows() != m || gamma.cols() != m) {
    throw ContractViolation("compute_alpha: gamma must be MxM");
  }
  double sum = 0.0;
  for (std::size_t a = 0; a < m; ++a) {
    const auto za = batch_of(reps, tuple.selected_users[a]).row(tuple.indices[a]);
    for (std::size_t b = 0; b < m; ++b) {
      if (a == b) continue;
      const auto zb = batch_of(reps, tuple.selected_users[b]).row(tuple.indices[b]);
      sum += gamma(a, b) * dot(za, zb);
    }
  }
  return -0.5 * sum;
}

double compute_alpha(std::span<const RepresentationBatch> reps, const TupleIndex& tuple,
                     const Matrix& gamma) {
  return std::exp(compute_log_alpha(reps, tuple, gamma));
}

std::vector<double> compute_aggregate(std::span<const RepresentationBatch> reps,
                                      const TupleIndex& tuple, const TemperatureTable& table) {
  check_tuple(reps, tuple);
  if (tuple.selected_users != table.members) {
    throw ContractViolation("compute_aggregate: tuple users differ from the table members");
  }
  std::vector<double> s(batch_of(reps, tuple.selected_users.front()).cols(), 0.0);
  for (std::size_t m = 0; m < tuple.selected_users.size(); ++m) {
    const auto z = batch_of(reps, tuple.selected_users[m]).row(tuple.indices[m]);
    if (z.size() != s.size()) throw ContractViolation("compute_aggregate: dimension mismatch");
    const double inv_tau = 1.0 / table.anchor_tau(m);
    for (std::size_t c = 0; c < s.size(); ++c) s[c] += z[c] * inv_tau;
  }
  return s;
}

std::size_t tuple_count(std::size_t batch_size, std::size_t m) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < m; ++i) n *= batch_size;
  return n;
}

double AggregatePackage::alpha(std::size_t row) const { return std::exp(log_alpha.at(row)); }

std::size_t AggregatePackage::positive_row(std::size_t i) const {
  std::size_t row = 0;
  for (std::size_t m = 0; m < selected_users.size(); ++m) row = row * batch_size + i;
  return row;
}

TupleIndex AggregatePackage::tuple_at(std::size_t row) const {
  TupleIndex t{selected_users, std::vector<std::size_t>(selected_users.size())};
  for (std::size_t m = selected_users.size(); m-- > 0;) {
    t.indices[m] = row % batch_size;
    row /= batch_size;
  }
  return t;
}

AggregatePackage build_package(std::span<const RepresentationBatch> reps,
                               const TemperatureTable& table) {
  const std::size_t m = table.m();
  if (m == 0) throw ContractViolation("build_package: no selected users");
  if (table.gamma.rows() != m || table.tau_high.rows() != m + 1) {
    throw ContractViolation("build_package: temperature table does not match selection");
  }
  std::vector<const RepresentationBatch*> z(m);
  for (std::size_t a = 0; a < m; ++a) {
    if (table.members[a] == table.anchor) {
      throw ContractViolation("build_package: anchor among selected users");
    }
    z[a] = &batch_of(reps, table.members[a]);
  }
  const std::size_t b = z[0]->rows();
  const std::size_t d = z[0]->cols();
  for (const auto* zm : z) {
    if (zm->rows() != b || zm->cols() != d) {
      throw ContractViolation("build_package: inconsistent batch shapes across users");
    }
  }

  // Pairwise dot tables for a < b: dots[a][b](i, j) = z^a_i . z^b_j.
  std::vector<std::vector<Matrix>> dots(m, std::vector<Matrix>(m));
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t c = a + 1; c < m; ++c) {
      dots[a][c] = Matrix(b, b);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) dots[a][c](i, j) = dot(z[a]->row(i), z[c]->row(j));
      }
    }
  }
  std::vector<double> inv_tau(m);
  for (std::size_t a = 0; a < m; ++a) inv_tau[a] = 1.0 / table.anchor_tau(a);

  AggregatePackage pkg;
  pkg.owner = table.anchor;
  pkg.selected_users = table.members;
  pkg.batch_size = b;
  const std::size_t rows = tuple_count(b, m);
  pkg.s_matrix = Matrix(rows, d);
  pkg.log_alpha.assign(rows, 0.0);

  std::vector<std::size_t> idx(m, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto s = pkg.s_matrix.row(r);
    for (std::size_t a = 0; a < m; ++a) {
      const auto za = z[a]->row(idx[a]);
      for (std::size_t c = 0; c < d; ++c) s[c] += za[c] * inv_tau[a];
    }
    // Ordered-pair double sum with the 1/2 factor folds to the unordered sum
    // when gamma is symmetric.
    double acc = 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      for (std::size_t c = a + 1; c < m; ++c) {
        acc += 0.5 * (table.gamma(a, c) + table.gamma(c, a)) * dots[a][c](idx[a], idx[c]);
      }
    }
    pkg.log_alpha[r] = -acc;
    for (std::size_t a = m; a-- > 0;) {
      if (++idx[a] < b) break;
      idx[a] = 0;
    }
  }
  return pkg;
}

namespace {

// Logits ln alpha_j + z_i . s_j for one anchor row, validated as finite.
void package_logits(std::span<const double> z, const AggregatePackage& pkg,
                    std::vector<double>& logits) {
  logits.resize(pkg.row_count());
  for (std::size_t r = 0; r < pkg.row_count(); ++r) {
    logits[r] = pkg.log_alpha[r] + dot(z, pkg.s_matrix.row(r));
    if (!std::isfinite(logits[r])) {
      const auto t = pkg.tuple_at(r);
      std::string where;
      for (std::size_t k = 0; k < t.indices.size(); ++k) {
        where += (k ? "," : "") + std::to_string(t.indices[k]);
      }
      throw ContractViolation("muscle: non-finite logit at tuple (" + where + ")");
    }
  }
}

}  // namespace

std::vector<double> muscle_loss_per_sample(const RepresentationBatch& anchor_batch,
                                           const AggregatePackage& pkg) {
  check_anchor_shape(anchor_batch, pkg);
  std::vector<double> out(anchor_batch.rows());
  std::vector<double> logits;
  for (std::size_t i = 0; i < anchor_batch.rows(); ++i) {
    package_logits(anchor_batch.row(i), pkg, logits);
    out[i] = log_sum_exp(logits) - logits[pkg.positive_row(i)];
  }
  return out;
}

double muscle_loss(const RepresentationBatch& anchor_batch, const AggregatePackage& pkg) {
  const auto per = muscle_loss_per_sample(anchor_batch, pkg);
  double s = 0.0;
  for (double v : per) s += v;
  return s / static_cast<double>(per.size());
}

LossAndGrad muscle_loss_and_grad(const RepresentationBatch& anchor_batch,
                                 const AggregatePackage& pkg) {
  check_anchor_shape(anchor_batch, pkg);
  const std::size_t b = anchor_batch.rows();
  const std::size_t d = anchor_batch.cols();
  LossAndGrad out{0.0, Matrix(b, d)};
  std::vector<double> logits;
  std::vector<double> p;
  for (std::size_t i = 0; i < b; ++i) {
    package_logits(anchor_batch.row(i), pkg, logits);
    const std::size_t pos = pkg.positive_row(i);
    out.loss += log_sum_exp(logits) - logits[pos];
    p.resize(logits.size());
    softmax(logits, p);
    // sum_j p_j (s_pos - s_j): exactly zero when every row equals s_pos.
    auto g = out.grad.row(i);
    const auto s_pos = pkg.s_matrix.row(pos);
    for (std::size_t r = 0; r < pkg.row_count(); ++r) {
      const auto s = pkg.s_matrix.row(r);
      for (std::size_t c = 0; c < d; ++c) g[c] += p[r] * (s_pos[c] - s[c]);
    }
    for (std::size_t c = 0; c < d; ++c) g[c] *= -1.0 / static_cast<double>(b);
  }
  out.loss /= static_cast<double>(b);
  return out;
}

Matrix muscle_loss_grad(const RepresentationBatch& anchor_batch, const AggregatePackage& pkg) {
  return muscle_loss_and_grad(anchor_batch, pkg).grad;
}

LossAndGrad infonce_loss_and_grad(const RepresentationBatch& anchor_batch,
                                  const RepresentationBatch& other_batch, double tau) {
  if (!anchor_batch.same_shape(other_batch)) {
    throw ContractViolation("infonce: batch shapes differ");
  }
  if (!(tau > 0.0)) throw ContractViolation("infonce: temperature must be positive");
  const std::size_t b = anchor_batch.rows();
  const std::size_t d = anchor_batch.cols();
  LossAndGrad out{0.0, Matrix(b, d)};
  std::vector<double> logits(b);
  std::vector<double> p(b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) logits[j] = dot(anchor_batch.row(i), other_batch.row(j)) / tau;
    out.loss += log_sum_exp(logits) - logits[i];
    softmax(logits, p);
    auto g = out.grad.row(i);
    const auto y_pos = other_batch.row(i);
    for (std::size_t j = 0; j < b; ++j) {
      const auto y = other_batch.row(j);
      for (std::size_t c = 0; c < d; ++c) g[c] += p[j] * (y_pos[c] - y[c]);
    }
    for (std::size_t c = 0; c < d; ++c) g[c] *= -1.0 / (tau * static_cast<double>(b));
  }
  out.loss /= static_cast<double>(b);
  return out;
}

double infonce_loss(const RepresentationBatch& anchor_batch,
                    const RepresentationBatch& other_batch, double tau) {
  return infonce_loss_and_grad(anchor_batch, other_batch, tau).loss;
}

LossAndGrad pairwise_loss_and_grad(const RepresentationBatch& anchor_batch,
                                   std::span<const RepresentationBatch> reps,
                                   const TemperatureTable& table) {
  LossAndGrad out{0.0, Matrix(anchor_batch.rows(), anchor_batch.cols())};
  for (std::size_t m = 0; m < table.m(); ++m) {
    const auto part =
        infonce_loss_and_grad(anchor_batch, batch_of(reps, table.members[m]), table.anchor_tau(m));
    out.loss += part.loss;
    auto dst = out.grad.values();
    const auto src = part.grad.values();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
  return out;
}

double pairwise_loss(const RepresentationBatch& anchor_batch,
                     std::span<const RepresentationBatch> reps, const TemperatureTable& table) {
  return pairwise_loss_and_grad(anchor_batch, reps, table).loss;
}

double gramian_volume(const Matrix& rows) { return std::sqrt(std::max(det(gram(rows)), 0.0)); }

namespace {

struct VolumeAndGrad {
  double volume = 0.0;
  std::vector<double> grad_anchor;
};

// Volume of [anchor; tuple rows] and its gradient in the anchor row:
// dVol/du_0 = Vol * (G^{-1} U)_0.
VolumeAndGrad volume_with_anchor_grad(const Matrix& u) {
  const Matrix g = gram(u);
  const double dg = det(g);
  VolumeAndGrad out{std::sqrt(std::max(dg, 0.0)), std::vector<double>(u.cols(), 0.0)};
  if (dg <= 0.0) return out;
  const Matrix gi = inverse(g);
  for (std::size_t k = 0; k < u.rows(); ++k) {
    const double w = out.volume * gi(0, k);
    const auto uk = u.row(k);
    for (std::size_t c = 0; c < u.cols(); ++c) out.grad_anchor[c] += w * uk[c];
  }
  return out;
}

}  // namespace

LossAndGrad gramian_loss_and_grad(const RepresentationBatch& anchor_batch,
                                  std::span<const RepresentationBatch> reps,
                                  std::span<const UserId> members, double tau,
                                  std::size_t num_negatives) {
  if (!(tau > 0.0)) throw ContractViolation("gramian: temperature must be positive");
  if (members.empty()) throw ContractViolation("gramian: no selected users");
  const std::size_t b = anchor_batch.rows();
  const std::size_t d = anchor_batch.cols();
  const std::size_t k = members.size() + 1;
  if (k > d) {
    throw ConfigError("gramian: ensemble size " + std::to_string(k) + " exceeds dimension " +
                      std::to_string(d) + "; every Gram determinant would be zero");
  }
  for (UserId u : members) {
    const auto& z = batch_of(reps, u);
    if (!z.same_shape(anchor_batch)) throw ContractViolation("gramian: batch shapes differ");
  }
  const std::size_t negatives = num_negatives == 0 ? b - 1 : num_negatives;
  if (negatives > b - 1 && b > 1) throw ContractViolation("gramian: too many negatives");

  LossAndGrad out{0.0, Matrix(b, d)};
  Matrix u(k, d);
  const std::size_t candidates = b == 1 ? 1 : negatives + 1;
  std::vector<double> logits(candidates);
  std::vector<double> p(candidates);
  std::vector<std::vector<double>> vol_grads(candidates);
  for (std::size_t i = 0; i < b; ++i) {
    std::copy_n(anchor_batch.row(i).begin(), d, u.row(0).begin());
    for (std::size_t c = 0; c < candidates; ++c) {
      const std::size_t j = (i + c) % b;
      for (std::size_t m = 0; m < members.size(); ++m) {
        std::copy_n(reps[members[m]].row(j).begin(), d, u.row(m + 1).begin());
      }
      auto vg = volume_with_anchor_grad(u);
      logits[c] = -vg.volume / tau;
      vol_grads[c] = std::move(vg.grad_anchor);
    }
    out.loss += log_sum_exp(logits) - logits[0];
    softmax(logits, p);
    // dL_i/dz = (1/tau) (dVol_pos - sum_c p_c dVol_c)
    auto g = out.grad.row(i);
    for (std::size_t c = 0; c < candidates; ++c) {
      for (std::size_t e = 0; e < d; ++e) g[e] += p[c] * (vol_grads[0][e] - vol_grads[c][e]);
    }
    for (std::size_t e = 0; e < d; ++e) g[e] /= tau * static_cast<double>(b);
  }
  out.loss /= static_cast<double>(b);
  return out;
}

double gramian_loss(const RepresentationBatch& anchor_batch,
                    std::span<const RepresentationBatch> reps, std::span<const UserId> members,
                    double tau, std::size_t num_negatives) {
  return gramian_loss_and_grad(anchor_batch, reps, members, tau, num_negatives).loss;
}

double mi_bound_gap(double mean_loss, std::size_t batch_size, std::size_t m_selected) {
  if (batch_size == 0) throw ContractViolation("mi_bound_gap: batch size must be positive");
  return static_cast<double>(m_selected) * std::log(static_cast<double>(batch_size)) - mean_loss;
}

}  // namespace fedmuscle
