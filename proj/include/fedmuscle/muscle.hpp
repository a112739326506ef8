#pragma once

// Multi-model contrastive objectives and their gradients with respect to the
// anchor representations.
//
// Conventions shared by every function here:
//  * A representation batch is a B×d matrix whose rows are unit vectors.
//  * `reps` is indexed by user id; only the rows of users that take part in a
//    call are read.
//  * An ensemble is the anchor plus M selected users (K = M + 1). Inside a
//    TemperatureTable position 0 of tau_high is the anchor and positions
//    1..M are the selected users in ascending id order.
//  * Index tuples j = (j_1, .., j_M) are enumerated lexicographically with the
//    lowest selected user id as the most significant digit. Row r of an
//    AggregatePackage is tuple r written in base B.

#include "fedmuscle/numerics.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace fedmuscle {

using UserId = std::uint32_t;
using RepresentationBatch = Matrix;

/// Temperatures for one ensemble (anchor + selected users).
struct TemperatureTable {
  std::size_t k_eff = 0;
  UserId anchor = 0;
  std::vector<UserId> members;
  /// K×K pair temperatures tau^(K); index 0 is the anchor.
  Matrix tau_high;
  /// M×M pair temperatures tau^(K-1) among the selected users.
  Matrix tau_low;
  /// M×M, gamma = 1/tau_low - 1/tau_high among the selected users.
  Matrix gamma;

  std::size_t m() const { return members.size(); }
  /// tau^(K) between the anchor and the member at `position`.
  double anchor_tau(std::size_t position) const { return tau_high(0, position + 1); }
};

enum class LowTemperatureMode { supplied, derived };

/// Pair temperatures over all N users from which per-ensemble tables are cut.
struct TemperatureSchedule {
  Matrix tau_high;
  Matrix tau_low;
  LowTemperatureMode mode = LowTemperatureMode::supplied;

  static TemperatureSchedule uniform(std::size_t n_users, double tau_high, double tau_low,
                                     LowTemperatureMode mode = LowTemperatureMode::supplied);

  TemperatureTable table_for(UserId anchor, std::span<const UserId> selected) const;
};

/// Removes `anchor_index` from a K×K tau^(K) table and returns tau^(K-1) for the
/// remaining K-1 participants: 1/t'_{kl} = 1/t_{kl} + 1/(t_{k,a} t_{l,a}).
Matrix derive_lower_temperatures(const Matrix& tau_high, std::size_t anchor_index);

/// Elementwise 1/tau_low - 1/tau_high. Negative off-diagonal entries are
/// reported on stderr but returned unchanged.
Matrix compute_gamma(const Matrix& tau_high, const Matrix& tau_low);

struct TupleIndex {
  std::vector<UserId> selected_users;
  std::vector<std::size_t> indices;
};

/// ln alpha_j = -1/2 sum_{m} sum_{m' != m} gamma_{m,m'} z^m_{j_m} . z^{m'}_{j_{m'}}.
/// `gamma` is M×M in the order of tuple.selected_users.
double compute_log_alpha(std::span<const RepresentationBatch> reps, const TupleIndex& tuple,
                         const Matrix& gamma);
double compute_alpha(std::span<const RepresentationBatch> reps, const TupleIndex& tuple,
                     const Matrix& gamma);

/// s_j = sum_m z^m_{j_m} / tau^(K)_{anchor,m}.
std::vector<double> compute_aggregate(std::span<const RepresentationBatch> reps,
                                      const TupleIndex& tuple, const TemperatureTable& table);

/// Server-side S^n and alpha^n for one user.
struct AggregatePackage {
  UserId owner = 0;
  std::vector<UserId> selected_users;
  std::size_t batch_size = 0;
  /// B^M × d; row r holds s_j for the r-th tuple in lexicographic order.
  Matrix s_matrix;
  /// ln alpha_j per row. Logits are formed as ln alpha + z.s so alpha itself
  /// never needs to be materialized during training.
  std::vector<double> log_alpha;

  std::size_t row_count() const { return s_matrix.rows(); }
  std::size_t dim() const { return s_matrix.cols(); }
  double alpha(std::size_t row) const;
  /// Row of the all-equal tuple (i, .., i).
  std::size_t positive_row(std::size_t i) const;
  TupleIndex tuple_at(std::size_t row) const;
};

std::size_t tuple_count(std::size_t batch_size, std::size_t m);

AggregatePackage build_package(std::span<const RepresentationBatch> reps,
                               const TemperatureTable& table);

std::vector<double> muscle_loss_per_sample(const RepresentationBatch& anchor_batch,
                                           const AggregatePackage& pkg);
double muscle_loss(const RepresentationBatch& anchor_batch, const AggregatePackage& pkg);
/// Gradient of the batch-mean loss with respect to the anchor rows.
Matrix muscle_loss_grad(const RepresentationBatch& anchor_batch, const AggregatePackage& pkg);

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};
LossAndGrad muscle_loss_and_grad(const RepresentationBatch& anchor_batch,
                                 const AggregatePackage& pkg);

double infonce_loss(const RepresentationBatch& anchor_batch,
                    const RepresentationBatch& other_batch, double tau);
LossAndGrad infonce_loss_and_grad(const RepresentationBatch& anchor_batch,
                                  const RepresentationBatch& other_batch, double tau);

/// Sum of InfoNCE over the table's members, each with tau^(K)_{anchor,m}.
double pairwise_loss(const RepresentationBatch& anchor_batch,
                     std::span<const RepresentationBatch> reps, const TemperatureTable& table);
LossAndGrad pairwise_loss_and_grad(const RepresentationBatch& anchor_batch,
                                   std::span<const RepresentationBatch> reps,
                                   const TemperatureTable& table);

/// sqrt(max(det(U Uᵀ), 0)) for the rows of U.
double gramian_volume(const Matrix& rows);

/// Volume-based contrastive loss. For anchor row i the candidates are the
/// same-index tuple i (positive) and the tuples i+1, .., i+num_negatives
/// (mod B). num_negatives == 0 selects all B-1 other indices.
double gramian_loss(const RepresentationBatch& anchor_batch,
                    std::span<const RepresentationBatch> reps, std::span<const UserId> members,
                    double tau, std::size_t num_negatives = 0);
LossAndGrad gramian_loss_and_grad(const RepresentationBatch& anchor_batch,
                                  std::span<const RepresentationBatch> reps,
                                  std::span<const UserId> members, double tau,
                                  std::size_t num_negatives = 0);

/// M ln B - mean_loss: the certified lower bound on the mutual information
/// between the anchor and the selected users' representations.
double mi_bound_gap(double mean_loss, std::size_t batch_size, std::size_t m_selected);

}  // namespace fedmuscle
