#include "fedmuscle/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace fedmuscle {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t as_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw ConfigKeyError(key, "expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw ConfigKeyError(key, "expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

double as_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw ConfigKeyError(key, "expected a number, got '" + v + "'");
  }
  return out;
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigKeyError(key, "expected true or false, got '" + v + "'");
}

std::string fmt_real(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

ConfigMap parse_config(std::istream& in) {
  ConfigMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = value;
  }
  return out;
}

ConfigMap load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

ConfigMap merge(ConfigMap base, const ConfigMap& top) {
  for (const auto& [k, v] : top) base[k] = v;
  return base;
}

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys = {
      "experiment.algorithm",     "experiment.seed",         "experiment.profile",
      "federation.rounds",        "federation.local_epochs", "federation.cl_epochs",
      "federation.batch_size",    "federation.local_batch_size",
      "federation.m_select",      "federation.selection",    "federation.wire_roundtrip",
      "model.dim",                "model.lr",                "model.weight_decay",
      "model.beta1",              "model.beta2",             "model.eps",
      "muscle.tau_high",          "muscle.tau_low",          "muscle.tau_mode",
      "muscle.gramian_negatives", "data.public_size",        "data.latent_dim",
      "data.test_size",           "data.noise",              "data.nuisance_scale",
      "data.train_scale",         "output.dir",
  };
  return keys;
}

const std::vector<std::string>& required_config_keys() {
  static const std::vector<std::string> keys = {"experiment.algorithm", "experiment.seed"};
  return keys;
}

Profile parse_profile(const std::string& name) {
  if (name == "desk") return Profile::desk;
  if (name == "paper") return Profile::paper;
  throw ConfigKeyError("experiment.profile", "expected desk or paper, got '" + name + "'");
}

ExperimentConfig profile_defaults(Profile profile) {
  ExperimentConfig c;  // desk values are the struct defaults
  if (profile == Profile::paper) {
    c.rounds = 150;
    c.batch_size = 32;
    c.m_select = 3;
    c.dim = 256;
    c.public_size = 5000;
  }
  // Both profiles share E=1, T=1, temperatures 0.2/0.15 and AdamW lr 1e-3.
  return c;
}

ExperimentConfig build_experiment_config(const ConfigMap& values) {
  const auto& known = known_config_keys();
  for (const auto& [k, v] : values) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw ConfigKeyError(k, "unknown configuration key");
    }
  }
  for (const auto& k : required_config_keys()) {
    if (!values.contains(k)) throw ConfigKeyError(k, "missing required key");
  }
  auto get = [&](const std::string& k) -> const std::string* {
    const auto it = values.find(k);
    return it == values.end() ? nullptr : &it->second;
  };

  Profile profile = Profile::desk;
  if (const auto* v = get("experiment.profile")) profile = parse_profile(*v);
  ExperimentConfig c = profile_defaults(profile);

  try {
    c.algorithm = parse_algorithm(*get("experiment.algorithm"));
  } catch (const ConfigError& e) {
    throw ConfigKeyError("experiment.algorithm", e.what());
  }
  c.seed = as_u64("experiment.seed", *get("experiment.seed"));

  auto count = [&](const char* k, std::size_t& field) {
    if (const auto* v = get(k)) field = as_count(k, *v);
  };
  auto real = [&](const char* k, double& field) {
    if (const auto* v = get(k)) field = as_real(k, *v);
  };
  count("federation.rounds", c.rounds);
  count("federation.local_epochs", c.local_epochs);
  count("federation.cl_epochs", c.cl_epochs);
  count("federation.batch_size", c.batch_size);
  count("federation.local_batch_size", c.local_batch_size);
  count("federation.m_select", c.m_select);
  if (const auto* v = get("federation.selection")) {
    if (*v == "per_epoch") {
      c.cadence = SelectionCadence::per_epoch;
    } else if (*v == "per_batch") {
      c.cadence = SelectionCadence::per_batch;
    } else {
      throw ConfigKeyError("federation.selection", "expected per_epoch or per_batch");
    }
  }
  if (const auto* v = get("federation.wire_roundtrip")) {
    c.wire_roundtrip = as_bool("federation.wire_roundtrip", *v);
  }
  count("model.dim", c.dim);
  real("model.lr", c.optimizer.lr);
  real("model.weight_decay", c.optimizer.weight_decay);
  real("model.beta1", c.optimizer.beta1);
  real("model.beta2", c.optimizer.beta2);
  real("model.eps", c.optimizer.eps);
  real("muscle.tau_high", c.tau_high);
  real("muscle.tau_low", c.tau_low);
  if (const auto* v = get("muscle.tau_mode")) {
    if (*v == "supplied") {
      c.tau_mode = LowTemperatureMode::supplied;
    } else if (*v == "derived") {
      c.tau_mode = LowTemperatureMode::derived;
    } else {
      throw ConfigKeyError("muscle.tau_mode", "expected supplied or derived");
    }
  }
  count("muscle.gramian_negatives", c.gramian_negatives);
  count("data.public_size", c.public_size);
  count("data.latent_dim", c.world.latent_dim);
  count("data.test_size", c.world.test_size);
  if (const auto* v = get("data.noise")) {
    const double noise = as_real("data.noise", *v);
    for (auto& u : c.world.users) u.noise = noise;
  }
  if (const auto* v = get("data.nuisance_scale")) {
    const double s = as_real("data.nuisance_scale", *v);
    for (auto& u : c.world.users) u.nuisance_scale = s;
  }
  if (const auto* v = get("data.train_scale")) {
    const double s = as_real("data.train_scale", *v);
    if (!(s > 0.0)) throw ConfigKeyError("data.train_scale", "must be positive");
    for (auto& u : c.world.users) {
      u.train_size = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(u.train_size) * s));
    }
  }

  const std::size_t n = c.users();
  if (c.algorithm != Algorithm::local && (c.m_select < 1 || c.m_select + 1 > n)) {
    throw ConfigKeyError("federation.m_select",
                         "must lie in [1, " + std::to_string(n - 1) + "], got " + std::to_string(c.m_select));
  }
  if (c.batch_size < 1) throw ConfigKeyError("federation.batch_size", "must be >= 1");
  if (c.local_batch_size < 1) throw ConfigKeyError("federation.local_batch_size", "must be >= 1");
  if (c.dim < 1) throw ConfigKeyError("model.dim", "must be >= 1");
  if (c.public_size < c.batch_size) {
    throw ConfigKeyError("data.public_size", "must be at least federation.batch_size");
  }
  if (!(c.tau_high > 0.0)) throw ConfigKeyError("muscle.tau_high", "must be positive");
  if (!(c.tau_low > 0.0)) throw ConfigKeyError("muscle.tau_low", "must be positive");
  if (c.algorithm == Algorithm::gramian && c.m_select + 1 > c.dim) {
    throw ConfigKeyError("model.dim", "gramian loss needs m_select + 1 <= dim");
  }
  if (!(c.optimizer.lr > 0.0)) throw ConfigKeyError("model.lr", "must be positive");
  try {
    c.world.validate();
  } catch (const ConfigError& e) {
    throw ConfigKeyError("data.latent_dim", e.what());
  }
  c.validate();
  return c;
}

ConfigMap describe(const ExperimentConfig& c) {
  ConfigMap m;
  m["experiment.algorithm"] = to_string(c.algorithm);
  m["experiment.seed"] = std::to_string(c.seed);
  m["federation.rounds"] = std::to_string(c.rounds);
  m["federation.local_epochs"] = std::to_string(c.local_epochs);
  m["federation.cl_epochs"] = std::to_string(c.cl_epochs);
  m["federation.batch_size"] = std::to_string(c.batch_size);
  m["federation.local_batch_size"] = std::to_string(c.local_batch_size);
  m["federation.m_select"] = std::to_string(c.m_select);
  m["federation.selection"] = c.cadence == SelectionCadence::per_epoch ? "per_epoch" : "per_batch";
  m["federation.wire_roundtrip"] = c.wire_roundtrip ? "true" : "false";
  m["model.dim"] = std::to_string(c.dim);
  m["model.lr"] = fmt_real(c.optimizer.lr);
  m["model.weight_decay"] = fmt_real(c.optimizer.weight_decay);
  m["model.beta1"] = fmt_real(c.optimizer.beta1);
  m["model.beta2"] = fmt_real(c.optimizer.beta2);
  m["model.eps"] = fmt_real(c.optimizer.eps);
  m["muscle.tau_high"] = fmt_real(c.tau_high);
  m["muscle.tau_low"] = fmt_real(c.tau_low);
  m["muscle.tau_mode"] = c.tau_mode == LowTemperatureMode::supplied ? "supplied" : "derived";
  m["muscle.gramian_negatives"] = std::to_string(c.gramian_negatives);
  m["data.public_size"] = std::to_string(c.public_size);
  m["data.latent_dim"] = std::to_string(c.world.latent_dim);
  m["data.test_size"] = std::to_string(c.world.test_size);
  return m;
}

}  // namespace fedmuscle
