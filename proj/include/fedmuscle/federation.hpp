#pragma once

#include "fedmuscle/datagen.hpp"
#include "fedmuscle/models.hpp"
#include "fedmuscle/muscle.hpp"

#include <atomic>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fedmuscle {

enum class Algorithm { muscle, pairwise, gramian, local };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& name);

/// When the server redraws the M selected users for each anchor.
enum class SelectionCadence { per_epoch, per_batch };

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::muscle;
  std::uint64_t seed = 1;
  std::size_t rounds = 30;
  std::size_t local_epochs = 1;
  std::size_t cl_epochs = 1;
  std::size_t batch_size = 8;
  std::size_t local_batch_size = 16;
  std::size_t m_select = 2;
  std::size_t dim = 16;
  double tau_high = 0.2;
  double tau_low = 0.15;
  LowTemperatureMode tau_mode = LowTemperatureMode::supplied;
  /// Optional full N×N pair tables; override the scalars when present.
  std::optional<Matrix> tau_high_table;
  std::optional<Matrix> tau_low_table;
  std::size_t gramian_negatives = 0;
  SelectionCadence cadence = SelectionCadence::per_epoch;
  /// Pass every exchange through the 32-bit wire encoding.
  bool wire_roundtrip = false;
  std::size_t public_size = 256;
  AdamWConfig optimizer;
  WorldConfig world = WorldConfig::desk_default();
  /// Hidden layer widths per user; empty means the built-in heterogeneous mix.
  std::vector<std::vector<std::size_t>> hidden_dims;

  std::size_t users() const { return world.users.size(); }
  std::size_t k_eff() const { return m_select + 1; }
  std::vector<std::size_t> hidden_for(std::size_t user) const;
  TemperatureSchedule temperatures() const;
  void validate() const;
};

struct Client {
  UserId id = 0;
  Encoder encoder;
  Head head;
  OptimizerState task_encoder_opt;
  OptimizerState head_opt;
  OptimizerState cl_opt;
  LabeledDataset train;
  LabeledDataset test;
};

std::vector<Client> init_clients(const ExperimentConfig& config, const LatentWorld& world);

/// E passes of mini-batch AdamW on the task loss; returns the mean loss of the
/// last pass (0 when E == 0).
double local_update(Client& client, std::size_t epochs, std::size_t batch_size,
                    std::uint64_t seed, std::uint64_t round);

/// Mean task loss over a dataset.
double task_loss_on(const Client& client, const LabeledDataset& data);

/// Accuracy (classification) or micro-F1 (multi-label), in percent.
double evaluate(const Client& client, const LabeledDataset& data);

/// Uniform draw of m users from [0, n_users) without `anchor`, ascending.
std::vector<UserId> select_users(SeededRng& rng, UserId anchor, std::size_t n_users,
                                 std::size_t m);

struct LedgerEntry {
  std::uint64_t uplink_values = 0;
  std::uint64_t downlink_values = 0;
  std::uint64_t uplink_bytes() const { return uplink_values * 4; }
  std::uint64_t downlink_bytes() const { return downlink_values * 4; }
  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

/// Per (user, round) transmission counters; rounds are 1-based.
class CommLedger {
 public:
  CommLedger() = default;
  CommLedger(std::size_t users, std::size_t rounds);

  void record(std::size_t round, UserId user, std::uint64_t uplink, std::uint64_t downlink);
  const LedgerEntry& at(std::size_t round, UserId user) const;
  LedgerEntry total() const;
  std::size_t users() const { return users_; }
  std::size_t rounds() const { return rounds_; }

 private:
  std::size_t users_ = 0;
  std::size_t rounds_ = 0;
  std::vector<LedgerEntry> entries_;
};

/// Closed-form per-round communication.
struct CommCost {
  std::uint64_t uplink_per_batch = 0;
  std::uint64_t downlink_per_batch = 0;
  std::uint64_t batches_per_round = 0;
  std::uint64_t uplink_per_user_round = 0;
  std::uint64_t downlink_per_user_round = 0;
  std::uint64_t uplink_all_users_round = 0;
  std::uint64_t downlink_all_users_round = 0;
};

CommCost comm_cost(const ExperimentConfig& config);

struct RoundMetrics {
  std::size_t round = 0;
  UserId user = 0;
  double task_metric = 0.0;
  double cl_loss = 0.0;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
  friend bool operator==(const RoundMetrics&, const RoundMetrics&) = default;
};

struct ClRoundStats {
  std::vector<double> mean_loss;
};

/// T CL epochs over the shared public batch schedule for one round.
ClRoundStats cl_round(std::vector<Client>& clients, const LatentWorld& world,
                      const PublicDataset& pub, const ExperimentConfig& config,
                      std::size_t round, CommLedger& ledger, std::size_t threads = 1);

struct RunOptions {
  std::size_t threads = 1;
  const std::atomic<bool>* stop = nullptr;
};

struct ExperimentResult {
  /// Round 0 holds the initial evaluation.
  std::vector<RoundMetrics> trace;
  CommLedger ledger;
  std::vector<double> final_metrics;
  std::vector<HeadKind> task_kinds;
  std::vector<Client> clients;
  std::size_t completed_rounds = 0;
  bool interrupted = false;
};

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn);

}  // namespace fedmuscle

#include "fedmuscle/parallel.inl"
