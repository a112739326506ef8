#include "fedmuscle/federation.hpp"

#include "fedmuscle/wire.hpp"
#include "streams.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fedmuscle {

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::muscle: return "muscle";
    case Algorithm::pairwise: return "pairwise";
    case Algorithm::gramian: return "gramian";
    case Algorithm::local: return "local";
  }
  return "unknown";
}

Algorithm parse_algorithm(const std::string& name) {
  if (name == "muscle") return Algorithm::muscle;
  if (name == "pairwise") return Algorithm::pairwise;
  if (name == "gramian") return Algorithm::gramian;
  if (name == "local") return Algorithm::local;
  throw ConfigError("unknown algorithm '" + name + "' (muscle|pairwise|gramian|local)");
}

std::vector<std::size_t> ExperimentConfig::hidden_for(std::size_t user) const {
  if (!hidden_dims.empty()) return hidden_dims.at(user);
  if (user % 2 == 0) return {32};
  return {48, 24};
}

TemperatureSchedule ExperimentConfig::temperatures() const {
  auto s = TemperatureSchedule::uniform(users(), tau_high, tau_low, tau_mode);
  if (tau_high_table) s.tau_high = *tau_high_table;
  if (tau_low_table) s.tau_low = *tau_low_table;
  return s;
}

void ExperimentConfig::validate() const {
  world.validate();
  const std::size_t n = users();
  if (n < 2 && algorithm != Algorithm::local) throw ConfigError("at least two users required");
  if (algorithm != Algorithm::local && (m_select < 1 || m_select > n - 1)) {
    throw ConfigError("m_select must lie in [1, N-1] = [1, " + std::to_string(n - 1) + "], got " +
                      std::to_string(m_select));
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (local_batch_size < 1) throw ConfigError("local_batch_size must be >= 1");
  if (dim < 1) throw ConfigError("dim must be >= 1");
  if (public_size < batch_size) {
    throw ConfigError("public_size " + std::to_string(public_size) + " is below batch_size " +
                      std::to_string(batch_size));
  }
  if (!(tau_high > 0.0) || !(tau_low > 0.0)) throw ConfigError("temperatures must be positive");
  if (tau_high_table && (tau_high_table->rows() != n || tau_high_table->cols() != n)) {
    throw ConfigError("tau_high table must be NxN");
  }
  if (tau_low_table && (tau_low_table->rows() != n || tau_low_table->cols() != n)) {
    throw ConfigError("tau_low table must be NxN");
  }
  if (algorithm == Algorithm::gramian && m_select + 1 > dim) {
    throw ConfigError("gramian loss needs M+1 <= d; the Gram determinant vanishes otherwise");
  }
  if (!hidden_dims.empty() && hidden_dims.size() != n) {
    throw ConfigError("hidden_dims must list one entry per user");
  }
  if (!(optimizer.lr > 0.0)) throw ConfigError("learning rate must be positive");
}

std::vector<Client> init_clients(const ExperimentConfig& config, const LatentWorld& world) {
  std::vector<Client> clients;
  const std::uint64_t test_seed = mix64(config.seed ^ streams::kTestData);
  for (std::size_t u = 0; u < config.users(); ++u) {
    SeededRng rng(config.seed, stream_id(streams::kModelInit, u));
    const auto& fam = config.world.families.at(config.world.users[u].family);
    Client c;
    c.id = static_cast<UserId>(u);
    c.encoder = Encoder({world.views[u].input_dim(), config.hidden_for(u), config.dim, true}, rng);
    c.head = Head({fam.kind, fam.num_outputs}, config.dim, rng);
    c.task_encoder_opt.config = config.optimizer;
    c.head_opt.config = config.optimizer;
    c.cl_opt.config = config.optimizer;
    c.train = sample_local(world, u, config.world.users[u].train_size, config.seed);
    c.test = sample_local(world, u, config.world.test_size, test_seed);
    clients.push_back(std::move(c));
  }
  return clients;
}

double local_update(Client& client, std::size_t epochs, std::size_t batch_size,
                    std::uint64_t seed, std::uint64_t round) {
  const auto& data = client.train;
  if (data.size() == 0) throw ConfigError("local_update: empty dataset");
  double last = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    SeededRng rng(seed, stream_id(streams::kLocalShuffle, client.id, round, e));
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      ParamSet enc_grad = client.encoder.params().zeros_like();
      ParamSet head_grad = client.head.params().zeros_like();
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const auto cache = client.encoder.forward(data.inputs.row(i));
        auto tl = task_loss_and_grad(client.head, cache.z, data.labels[i]);
        total += tl.loss;
        head_grad.add(tl.head_grads);
        enc_grad.add(client.encoder.backward(cache, tl.grad_z).params);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      enc_grad.scale(inv);
      head_grad.scale(inv);
      adamw_step(client.task_encoder_opt, client.encoder.mutable_params(), enc_grad);
      adamw_step(client.head_opt, client.head.mutable_params(), head_grad);
    }
    last = total / static_cast<double>(data.size());
  }
  return last;
}

double task_loss_on(const Client& client, const LabeledDataset& data) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto cache = client.encoder.forward(data.inputs.row(i));
    total += task_loss_and_grad(client.head, cache.z, data.labels[i]).loss;
  }
  return total / static_cast<double>(data.size());
}

double evaluate(const Client& client, const LabeledDataset& data) {
  if (data.size() == 0) throw ContractViolation("evaluate: empty dataset");
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto cache = client.encoder.forward(data.inputs.row(i));
    const auto pred = client.head.predict(cache.z);
    if (data.kind == HeadKind::classification) {
      correct += pred.class_index == data.labels[i].class_index;
    } else {
      for (std::size_t k = 0; k < pred.active.size(); ++k) {
        const bool p = pred.active[k], t = data.labels[i].active[k];
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
      }
    }
  }
  if (data.kind == HeadKind::classification) {
    return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
  }
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom == 0.0 ? 0.0 : 100.0 * 2.0 * static_cast<double>(tp) / denom;
}

std::vector<UserId> select_users(SeededRng& rng, UserId anchor, std::size_t n_users,
                                 std::size_t m) {
  if (anchor >= n_users) throw ContractViolation("select_users: anchor out of range");
  if (m > n_users - 1) {
    throw ConfigError("select_users: cannot select " + std::to_string(m) + " of " +
                      std::to_string(n_users - 1) + " other users");
  }
  std::vector<UserId> pool;
  for (std::size_t u = 0; u < n_users; ++u) {
    if (u != anchor) pool.push_back(static_cast<UserId>(u));
  }
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  std::sort(pool.begin(), pool.end());
  return pool;
}

CommLedger::CommLedger(std::size_t users, std::size_t rounds)
    : users_(users), rounds_(rounds), entries_(users * rounds) {}

void CommLedger::record(std::size_t round, UserId user, std::uint64_t uplink,
                        std::uint64_t downlink) {
  if (round < 1 || round > rounds_ || user >= users_) {
    throw ContractViolation("CommLedger: (round, user) out of range");
  }
  auto& e = entries_[(round - 1) * users_ + user];
  e.uplink_values += uplink;
  e.downlink_values += downlink;
}

const LedgerEntry& CommLedger::at(std::size_t round, UserId user) const {
  if (round < 1 || round > rounds_ || user >= users_) {
    throw ContractViolation("CommLedger: (round, user) out of range");
  }
  return entries_[(round - 1) * users_ + user];
}

LedgerEntry CommLedger::total() const {
  LedgerEntry t;
  for (const auto& e : entries_) {
    t.uplink_values += e.uplink_values;
    t.downlink_values += e.downlink_values;
  }
  return t;
}

CommCost comm_cost(const ExperimentConfig& config) {
  CommCost c;
  if (config.algorithm == Algorithm::local) return c;
  const std::uint64_t b = config.batch_size;
  const std::uint64_t d = config.dim;
  const std::uint64_t m = config.m_select;
  c.uplink_per_batch = b * d;
  if (config.algorithm == Algorithm::muscle) {
    c.downlink_per_batch = tuple_count(b, m) * (d + 1);
  } else {
    // Baselines need the raw representation matrices of the selected users.
    c.downlink_per_batch = m * b * d;
  }
  c.batches_per_round = (config.public_size / config.batch_size) * config.cl_epochs;
  c.uplink_per_user_round = c.uplink_per_batch * c.batches_per_round;
  c.downlink_per_user_round = c.downlink_per_batch * c.batches_per_round;
  c.uplink_all_users_round = c.uplink_per_user_round * config.users();
  c.downlink_all_users_round = c.downlink_per_user_round * config.users();
  return c;
}

namespace {

// Re-raises a failure from one user's phase with the round and user attached.
template <typename Fn>
void in_phase(const char* phase, std::size_t round, std::size_t user, Fn&& fn) {
  try {
    fn();
  } catch (const DegenerateInput& e) {
    throw DegenerateInput(std::string(phase) + " failed in round " + std::to_string(round) +
                          " for user " + std::to_string(user) + ": " + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(phase) + " failed in round " + std::to_string(round) +
                             " for user " + std::to_string(user) + ": " + e.what());
  }
}

std::vector<UserId> draw_selection(const ExperimentConfig& config, UserId user, std::size_t round,
                                   std::size_t epoch, std::size_t batch) {
  const std::uint64_t slot =
      config.cadence == SelectionCadence::per_batch ? (std::uint64_t{epoch} << 32) | (batch + 1) : epoch;
  SeededRng rng(config.seed, stream_id(streams::kSelection, user, round, slot));
  return select_users(rng, user, config.users(), config.m_select);
}

}  // namespace

ClRoundStats cl_round(std::vector<Client>& clients, const LatentWorld& world,
                      const PublicDataset& pub, const ExperimentConfig& config,
                      std::size_t round, CommLedger& ledger, std::size_t threads) {
  const std::size_t n = clients.size();
  ClRoundStats stats{std::vector<double>(n, 0.0)};
  if (config.algorithm == Algorithm::local || config.cl_epochs == 0) return stats;

  const auto schedule = config.temperatures();
  const auto cost = comm_cost(config);
  std::vector<std::size_t> steps(n, 0);
  std::vector<Matrix> z(n);
  std::vector<Matrix> z_server(n);
  std::vector<std::vector<EncoderCache>> caches(n);
  std::vector<std::vector<UserId>> selection(n);

  for (std::size_t t = 0; t < config.cl_epochs; ++t) {
    const auto batches = public_batches(pub.size(), config.batch_size, config.seed, round, t);
    if (config.cadence == SelectionCadence::per_epoch) {
      for (std::size_t u = 0; u < n; ++u) {
        selection[u] = draw_selection(config, static_cast<UserId>(u), round, t, 0);
      }
    }
    for (std::size_t b = 0; b < batches.size(); ++b) {
      // Every user uploads Z^n before any user updates.
      parallel_for(n, threads, [&](std::size_t u) {
        in_phase("representation upload", round, u, [&] {
          const Matrix x = view_batch(world, pub, u, batches[b]);
          z[u] = clients[u].encoder.forward_batch(x, &caches[u]);
          z_server[u] = config.wire_roundtrip ? decode_representation(encode_representation(z[u]),
                                                                      z[u].rows(), z[u].cols())
                                              : z[u];
        });
      });
      parallel_for(n, threads, [&](std::size_t u) {
        in_phase("contrastive update", round, u, [&] {
          const auto user = static_cast<UserId>(u);
          if (config.cadence == SelectionCadence::per_batch) {
            selection[u] = draw_selection(config, user, round, t, b);
          }
          const auto table = schedule.table_for(user, selection[u]);
          LossAndGrad lg;
          switch (config.algorithm) {
            case Algorithm::muscle: {
              auto pkg = build_package(z_server, table);
              if (config.wire_roundtrip) pkg = decode_package(encode_package(pkg));
              lg = muscle_loss_and_grad(z[u], pkg);
              break;
            }
            case Algorithm::pairwise:
              lg = pairwise_loss_and_grad(z[u], z_server, table);
              break;
            case Algorithm::gramian:
              lg = gramian_loss_and_grad(z[u], z_server, table.members, config.tau_high,
                                         config.gramian_negatives);
              break;
            case Algorithm::local:
              return;
          }
          const ParamSet grads = clients[u].encoder.backward_batch(caches[u], lg.grad);
          adamw_step(clients[u].cl_opt, clients[u].encoder.mutable_params(), grads);
          stats.mean_loss[u] += lg.loss;
          ++steps[u];
          ledger.record(round, user, cost.uplink_per_batch, cost.downlink_per_batch);
        });
      });
    }
  }

  for (std::size_t u = 0; u < n; ++u) {
    if (steps[u] > 0) stats.mean_loss[u] /= static_cast<double>(steps[u]);
  }
  return stats;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto world = gen_world(config.world, config.seed);
  const auto pub = gen_public(world, config.public_size, config.batch_size, config.seed);
  ExperimentResult result;
  result.clients = init_clients(config, world);
  result.ledger = CommLedger(config.users(), config.rounds);
  const std::size_t n = config.users();
  for (const auto& c : result.clients) result.task_kinds.push_back(c.head.spec().kind);

  std::vector<double> metrics(n);
  auto evaluate_all = [&](std::size_t round, const std::vector<double>& cl_loss) {
    parallel_for(n, options.threads, [&](std::size_t u) {
      metrics[u] = evaluate(result.clients[u], result.clients[u].test);
    });
    for (std::size_t u = 0; u < n; ++u) {
      RoundMetrics rm{round, static_cast<UserId>(u), metrics[u], cl_loss[u], 0, 0};
      if (round > 0) {
        const auto& e = result.ledger.at(round, static_cast<UserId>(u));
        rm.uplink_bytes = e.uplink_bytes();
        rm.downlink_bytes = e.downlink_bytes();
      }
      result.trace.push_back(rm);
    }
  };

  evaluate_all(0, std::vector<double>(n, 0.0));
  for (std::size_t r = 1; r <= config.rounds; ++r) {
    if (options.stop && options.stop->load()) {
      result.interrupted = true;
      break;
    }
    parallel_for(n, options.threads, [&](std::size_t u) {
      in_phase("local update", r, u, [&] {
        local_update(result.clients[u], config.local_epochs, config.local_batch_size, config.seed, r);
      });
    });
    const auto stats = cl_round(result.clients, world, pub, config, r, result.ledger, options.threads);
    evaluate_all(r, stats.mean_loss);
    result.completed_rounds = r;
  }
  result.final_metrics = metrics;
  return result;
}

}  // namespace fedmuscle
