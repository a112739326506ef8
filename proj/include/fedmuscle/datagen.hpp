#pragma once

// Synthetic multi-task universe. Every sample is a latent object u ~ N(0, I_k).
// A task family labels u with a fixed linear labeler; each user observes u
// through its own view x = A_n u + N_n v + sigma * eps, where v is a
// user-private nuisance draw. Public data are latent objects that every user
// renders through its own view, so row i of every user's public batch refers
// to the same object.

#include "fedmuscle/models.hpp"
#include "fedmuscle/numerics.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace fedmuscle {

struct TaskFamilyConfig {
  std::string name;
  HeadKind kind = HeadKind::classification;
  std::size_t num_outputs = 2;
};

struct UserViewConfig {
  std::size_t family = 0;
  std::size_t input_dim = 0;
  double noise = 0.0;
  std::size_t nuisance_dim = 0;
  double nuisance_scale = 0.0;
  /// A_n = [I_k; 0] instead of a random mixing matrix.
  bool identity_mixing = false;
  std::size_t train_size = 100;
};

struct WorldConfig {
  std::size_t latent_dim = 12;
  std::vector<TaskFamilyConfig> families;
  std::vector<UserViewConfig> users;
  std::size_t test_size = 500;

  /// Three families (4-class, 8-class, 6-output multi-label), two users each.
  static WorldConfig desk_default();
  void validate() const;
};

struct Labeler {
  HeadKind kind = HeadKind::classification;
  /// num_outputs × k with orthonormal rows, so argmax/sign marginals are uniform.
  Matrix weight;
  Label label(std::span<const double> latent) const;
};

struct UserView {
  std::size_t family = 0;
  Matrix mixing;    // input_dim × k
  Matrix nuisance;  // input_dim × nuisance_dim
  double noise = 0.0;

  std::size_t input_dim() const { return mixing.rows(); }
};

struct LatentWorld {
  std::uint64_t seed = 0;
  std::size_t latent_dim = 0;
  std::vector<Labeler> labelers;
  std::vector<UserView> views;

  std::size_t user_count() const { return views.size(); }
  const Labeler& labeler_for(std::size_t user) const { return labelers.at(views.at(user).family); }
};

LatentWorld gen_world(const WorldConfig& config, std::uint64_t seed);

/// Exact text serialization (hex floats); equal worlds serialize identically.
std::string serialize_world(const LatentWorld& world);

struct LabeledDataset {
  HeadKind kind = HeadKind::classification;
  std::size_t num_outputs = 0;
  Matrix inputs;
  Matrix latents;
  std::vector<Label> labels;

  std::size_t size() const { return labels.size(); }
};

/// Renders latent object u for `user` with noise drawn from `rng`.
std::vector<double> render_view(const LatentWorld& world, std::size_t user,
                                std::span<const double> latent, SeededRng& rng);

LabeledDataset sample_local(const LatentWorld& world, std::size_t user, std::size_t n_samples,
                            std::uint64_t seed);

struct DirichletSample {
  LabeledDataset data;
  std::vector<double> proportions;
};

/// Label-skewed sampling for classification families: class proportions
/// p ~ Dir(alpha), then each sample draws a class from p and a latent
/// conditioned on that class by rejection.
DirichletSample sample_local_dirichlet(const LatentWorld& world, std::size_t user,
                                       std::size_t n_samples, double alpha, std::uint64_t seed);

struct PublicDataset {
  std::uint64_t seed = 0;
  Matrix latents;  // size × k

  std::size_t size() const { return latents.rows(); }
};

PublicDataset gen_public(const LatentWorld& world, std::size_t size, std::size_t batch_size,
                         std::uint64_t seed);

/// Deterministic in (public.seed, user, index).
std::vector<double> view(const LatentWorld& world, const PublicDataset& pub, std::size_t user,
                         std::size_t index);
Matrix view_batch(const LatentWorld& world, const PublicDataset& pub, std::size_t user,
                  std::span<const std::size_t> indices);

/// Shared shuffle of the public set for one (round, CL epoch), drop-last batching.
std::vector<std::vector<std::size_t>> public_batches(std::size_t public_size,
                                                     std::size_t batch_size,
                                                     std::uint64_t global_seed,
                                                     std::uint64_t round, std::uint64_t epoch);

void dump_dataset(std::ostream& out, const LabeledDataset& data);
LabeledDataset load_dataset(std::istream& in);

}  // namespace fedmuscle
