#include "fedmuscle/datagen.hpp"

#include "streams.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fedmuscle {

WorldConfig WorldConfig::desk_default() {
  WorldConfig c;
  c.latent_dim = 12;
  c.families = {
      {"coarse", HeadKind::classification, 4},
      {"fine", HeadKind::classification, 8},
      {"tags", HeadKind::multi_label, 6},
  };
  c.users = {
      {0, 24, 0.6, 8, 3.0, false, 64},  {0, 32, 0.6, 8, 3.0, false, 64},
      {1, 24, 0.6, 8, 3.0, false, 200}, {1, 32, 0.6, 8, 3.0, false, 200},
      {2, 24, 0.6, 8, 3.0, false, 120}, {2, 32, 0.6, 8, 3.0, false, 120},
  };
  c.test_size = 500;
  return c;
}

void WorldConfig::validate() const {
  if (latent_dim == 0) throw ConfigError("world: latent_dim must be >= 1");
  if (families.empty()) throw ConfigError("world: at least one task family required");
  if (users.empty()) throw ConfigError("world: at least one user required");
  for (const auto& f : families) {
    if (f.num_outputs == 0) throw ConfigError("world: family '" + f.name + "' has no outputs");
    if (f.num_outputs > latent_dim) {
      throw ConfigError("world: latent_dim " + std::to_string(latent_dim) +
                        " is below the label rank " + std::to_string(f.num_outputs) +
                        " of family '" + f.name + "'");
    }
  }
  for (std::size_t u = 0; u < users.size(); ++u) {
    const auto& v = users[u];
    const std::string who = "world: user " + std::to_string(u);
    if (v.family >= families.size()) throw ConfigError(who + " references unknown family");
    if (v.input_dim == 0) throw ConfigError(who + " has input_dim 0");
    if (v.noise < 0.0 || v.nuisance_scale < 0.0) throw ConfigError(who + " has negative noise");
    if (v.identity_mixing && v.input_dim < latent_dim) {
      throw ConfigError(who + " needs input_dim >= latent_dim for identity mixing");
    }
    if (v.train_size == 0) throw ConfigError(who + " has an empty training set");
  }
  if (test_size == 0) throw ConfigError("world: test_size must be >= 1");
}

Label Labeler::label(std::span<const double> latent) const {
  Label out;
  if (kind == HeadKind::classification) {
    double best = -INFINITY;
    for (std::size_t c = 0; c < weight.rows(); ++c) {
      const double s = dot(weight.row(c), latent);
      if (s > best) {
        best = s;
        out.class_index = c;
      }
    }
  } else {
    out.active.resize(weight.rows());
    for (std::size_t c = 0; c < weight.rows(); ++c) out.active[c] = dot(weight.row(c), latent) > 0.0;
  }
  return out;
}

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double scale, SeededRng& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = scale * rng.normal();
  return m;
}

void orthonormalize_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t p = 0; p < r; ++p) {
      const auto prev = m.row(p);
      const double proj = dot(row, prev);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] -= proj * prev[c];
    }
    const auto n = l2_normalize(row);
    std::copy(n.unit.begin(), n.unit.end(), row.begin());
  }
}

std::vector<double> draw_latent(std::size_t k, SeededRng& rng) {
  std::vector<double> u(k);
  for (auto& v : u) v = rng.normal();
  return u;
}

void append_hex(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, " %a", v);
  out += buf;
}

void append_matrix(std::string& out, const Matrix& m) {
  out += "matrix " + std::to_string(m.rows()) + " " + std::to_string(m.cols()) + "\n";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (double v : m.row(r)) append_hex(out, v);
    out += "\n";
  }
}

const char* kind_name(HeadKind k) {
  return k == HeadKind::classification ? "classification" : "multi_label";
}

HeadKind parse_kind(const std::string& s) {
  if (s == "classification") return HeadKind::classification;
  if (s == "multi_label") return HeadKind::multi_label;
  throw ContractViolation("unknown task kind '" + s + "'");
}

}  // namespace

LatentWorld gen_world(const WorldConfig& config, std::uint64_t seed) {
  config.validate();
  LatentWorld w;
  w.seed = seed;
  w.latent_dim = config.latent_dim;
  const double k = static_cast<double>(config.latent_dim);
  for (std::size_t f = 0; f < config.families.size(); ++f) {
    SeededRng rng(seed, stream_id(streams::kWorld, 0, f));
    Labeler l;
    l.kind = config.families[f].kind;
    l.weight = gaussian(config.families[f].num_outputs, config.latent_dim, 1.0, rng);
    orthonormalize_rows(l.weight);
    w.labelers.push_back(std::move(l));
  }
  for (std::size_t u = 0; u < config.users.size(); ++u) {
    const auto& uc = config.users[u];
    SeededRng rng(seed, stream_id(streams::kWorld, 1, u));
    UserView v;
    v.family = uc.family;
    v.noise = uc.noise;
    if (uc.identity_mixing) {
      v.mixing = Matrix(uc.input_dim, config.latent_dim);
      for (std::size_t i = 0; i < config.latent_dim; ++i) v.mixing(i, i) = 1.0;
    } else {
      v.mixing = gaussian(uc.input_dim, config.latent_dim, 1.0 / std::sqrt(k), rng);
    }
    const double nuisance_scale =
        uc.nuisance_dim == 0 ? 0.0 : uc.nuisance_scale / std::sqrt(static_cast<double>(uc.nuisance_dim));
    v.nuisance = gaussian(uc.input_dim, uc.nuisance_dim, nuisance_scale, rng);
    w.views.push_back(std::move(v));
  }
  return w;
}

std::string serialize_world(const LatentWorld& world) {
  std::string out = "fedmuscle-world v1\n";
  out += "seed " + std::to_string(world.seed) + "\n";
  out += "latent_dim " + std::to_string(world.latent_dim) + "\n";
  out += "families " + std::to_string(world.labelers.size()) + "\n";
  for (const auto& l : world.labelers) {
    out += std::string("family ") + kind_name(l.kind) + "\n";
    append_matrix(out, l.weight);
  }
  out += "users " + std::to_string(world.views.size()) + "\n";
  for (const auto& v : world.views) {
    out += "user family " + std::to_string(v.family) + " noise";
    append_hex(out, v.noise);
    out += "\n";
    append_matrix(out, v.mixing);
    append_matrix(out, v.nuisance);
  }
  return out;
}

std::vector<double> render_view(const LatentWorld& world, std::size_t user,
                                std::span<const double> latent, SeededRng& rng) {
  const auto& v = world.views.at(user);
  if (latent.size() != world.latent_dim) throw ContractViolation("render_view: latent size");
  std::vector<double> x(v.input_dim(), 0.0);
  for (std::size_t r = 0; r < x.size(); ++r) x[r] = dot(v.mixing.row(r), latent);
  if (v.nuisance.cols() > 0) {
    std::vector<double> nv(v.nuisance.cols());
    for (auto& e : nv) e = rng.normal();
    for (std::size_t r = 0; r < x.size(); ++r) x[r] += dot(v.nuisance.row(r), nv);
  }
  if (v.noise > 0.0) {
    for (auto& e : x) e += v.noise * rng.normal();
  }
  return x;
}

namespace {

LabeledDataset empty_dataset(const LatentWorld& world, std::size_t user, std::size_t n) {
  const auto& lab = world.labeler_for(user);
  LabeledDataset d;
  d.kind = lab.kind;
  d.num_outputs = lab.weight.rows();
  d.inputs = Matrix(n, world.views.at(user).input_dim());
  d.latents = Matrix(n, world.latent_dim);
  d.labels.reserve(n);
  return d;
}

void store_sample(LabeledDataset& d, std::size_t i, std::span<const double> u,
                  std::span<const double> x, Label label) {
  std::copy(u.begin(), u.end(), d.latents.row(i).begin());
  std::copy(x.begin(), x.end(), d.inputs.row(i).begin());
  d.labels.push_back(std::move(label));
}

}  // namespace

LabeledDataset sample_local(const LatentWorld& world, std::size_t user, std::size_t n_samples,
                            std::uint64_t seed) {
  if (n_samples == 0) throw ConfigError("sample_local: n_samples must be >= 1");
  auto d = empty_dataset(world, user, n_samples);
  SeededRng rng(seed, stream_id(streams::kLocalData, user));
  const auto& lab = world.labeler_for(user);
  for (std::size_t i = 0; i < n_samples; ++i) {
    const auto u = draw_latent(world.latent_dim, rng);
    const auto x = render_view(world, user, u, rng);
    store_sample(d, i, u, x, lab.label(u));
  }
  return d;
}

DirichletSample sample_local_dirichlet(const LatentWorld& world, std::size_t user,
                                       std::size_t n_samples, double alpha, std::uint64_t seed) {
  if (n_samples == 0) throw ConfigError("sample_local: n_samples must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("sample_local: dirichlet alpha must be positive");
  const auto& lab = world.labeler_for(user);
  if (lab.kind != HeadKind::classification) {
    throw ConfigError("sample_local: dirichlet partition needs a classification family");
  }
  DirichletSample out{empty_dataset(world, user, n_samples), {}};
  SeededRng rng(seed, stream_id(streams::kDirichlet, user));
  out.proportions = rng.dirichlet(lab.weight.rows(), alpha);
  std::vector<double> cdf(out.proportions.size());
  std::partial_sum(out.proportions.begin(), out.proportions.end(), cdf.begin());
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double r = rng.uniform() * cdf.back();
    const auto cls = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(std::upper_bound(cdf.begin(), cdf.end(), r) - cdf.begin(),
                                 static_cast<std::ptrdiff_t>(cdf.size()) - 1));
    std::vector<double> u;
    Label label;
    do {
      u = draw_latent(world.latent_dim, rng);
      label = lab.label(u);
    } while (label.class_index != cls);
    const auto x = render_view(world, user, u, rng);
    store_sample(out.data, i, u, x, std::move(label));
  }
  return out;
}

PublicDataset gen_public(const LatentWorld& world, std::size_t size, std::size_t batch_size,
                         std::uint64_t seed) {
  if (batch_size == 0 || size < batch_size) {
    throw ConfigError("public dataset size " + std::to_string(size) +
                      " is smaller than the batch size " + std::to_string(batch_size));
  }
  PublicDataset p;
  p.seed = seed;
  p.latents = Matrix(size, world.latent_dim);
  SeededRng rng(seed, stream_id(streams::kPublicLatent));
  for (auto& v : p.latents.values()) v = rng.normal();
  return p;
}

std::vector<double> view(const LatentWorld& world, const PublicDataset& pub, std::size_t user,
                         std::size_t index) {
  if (index >= pub.size()) throw ContractViolation("view: public index out of range");
  SeededRng rng(pub.seed, stream_id(streams::kPublicView, user, index));
  return render_view(world, user, pub.latents.row(index), rng);
}

Matrix view_batch(const LatentWorld& world, const PublicDataset& pub, std::size_t user,
                  std::span<const std::size_t> indices) {
  Matrix out(indices.size(), world.views.at(user).input_dim());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto x = view(world, pub, user, indices[i]);
    std::copy(x.begin(), x.end(), out.row(i).begin());
  }
  return out;
}

std::vector<std::vector<std::size_t>> public_batches(std::size_t public_size,
                                                     std::size_t batch_size,
                                                     std::uint64_t global_seed,
                                                     std::uint64_t round, std::uint64_t epoch) {
  if (batch_size == 0 || public_size < batch_size) {
    throw ConfigError("public_batches: public set smaller than one batch");
  }
  std::vector<std::size_t> order(public_size);
  std::iota(order.begin(), order.end(), 0);
  SeededRng rng(global_seed, stream_id(streams::kPublicShuffle, round, epoch));
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches(public_size / batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b) {
    batches[b].assign(order.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                      order.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size));
  }
  return batches;
}

void dump_dataset(std::ostream& out, const LabeledDataset& data) {
  std::string s = "fedmuscle-dataset v1\n";
  s += std::string("kind ") + kind_name(data.kind) + "\n";
  s += "outputs " + std::to_string(data.num_outputs) + "\n";
  s += "input_dim " + std::to_string(data.inputs.cols()) + "\n";
  s += "latent_dim " + std::to_string(data.latents.cols()) + "\n";
  s += "rows " + std::to_string(data.size()) + "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& l = data.labels[i];
    if (data.kind == HeadKind::classification) {
      s += std::to_string(l.class_index);
    } else {
      for (auto b : l.active) s += b ? '1' : '0';
    }
    s += " |";
    for (double v : data.inputs.row(i)) append_hex(s, v);
    s += " |";
    for (double v : data.latents.row(i)) append_hex(s, v);
    s += "\n";
  }
  out << s;
}

LabeledDataset load_dataset(std::istream& in) {
  auto expect = [&](const std::string& key) {
    std::string k;
    in >> k;
    if (k != key) throw ContractViolation("load_dataset: expected '" + key + "', found '" + k + "'");
  };
  std::string line;
  std::getline(in, line);
  if (line != "fedmuscle-dataset v1") throw ContractViolation("load_dataset: bad header");
  LabeledDataset d;
  std::string kind;
  std::size_t outputs = 0, input_dim = 0, latent_dim = 0, rows = 0;
  expect("kind");
  in >> kind;
  expect("outputs");
  in >> outputs;
  expect("input_dim");
  in >> input_dim;
  expect("latent_dim");
  in >> latent_dim;
  expect("rows");
  in >> rows;
  if (!in) throw ContractViolation("load_dataset: malformed header");
  d.kind = parse_kind(kind);
  d.num_outputs = outputs;
  d.inputs = Matrix(rows, input_dim);
  d.latents = Matrix(rows, latent_dim);
  auto read_hex = [&]() {
    std::string tok;
    in >> tok;
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (tok.empty() || *end != '\0') throw ContractViolation("load_dataset: bad number '" + tok + "'");
    return v;
  };
  for (std::size_t i = 0; i < rows; ++i) {
    std::string label_tok;
    in >> label_tok;
    Label l;
    if (d.kind == HeadKind::classification) {
      l.class_index = std::stoul(label_tok);
    } else {
      if (label_tok.size() != outputs) throw ContractViolation("load_dataset: label width");
      for (char c : label_tok) l.active.push_back(c == '1' ? 1 : 0);
    }
    expect("|");
    for (auto& v : d.inputs.row(i)) v = read_hex();
    expect("|");
    for (auto& v : d.latents.row(i)) v = read_hex();
    d.labels.push_back(std::move(l));
  }
  if (!in) throw ContractViolation("load_dataset: truncated table");
  return d;
}

}  // namespace fedmuscle
