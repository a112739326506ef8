#pragma once

// Flat key-value experiment configuration.
//
//   # comment
//   experiment.algorithm = muscle
//   federation.rounds = 30
//
// Values are resolved as command-line flag > file > profile default.

#include "fedmuscle/federation.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace fedmuscle {

/// A configuration problem attributable to one key.
class ConfigKeyError : public ConfigError {
 public:
  ConfigKeyError(std::string key, const std::string& message)
      : ConfigError(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

using ConfigMap = std::map<std::string, std::string>;

enum class Profile { desk, paper };

ConfigMap parse_config(std::istream& in);
ConfigMap load_config_file(const std::string& path);

/// Overlays `top` onto `base`.
ConfigMap merge(ConfigMap base, const ConfigMap& top);

/// All recognized keys, in documentation order.
const std::vector<std::string>& known_config_keys();
/// Keys that have no default and must be given in the file or as a flag.
const std::vector<std::string>& required_config_keys();

/// Defaults for a profile: "desk" scales the reported hyperparameters down to
/// a laptop-sized run, "paper" keeps them (B=32, M=3, d=256, R=150, |D|=5000).
ExperimentConfig profile_defaults(Profile profile);
Profile parse_profile(const std::string& name);

/// Validates every key and builds the experiment configuration.
ExperimentConfig build_experiment_config(const ConfigMap& values);

/// Canonical key-value echo of a resolved configuration.
ConfigMap describe(const ExperimentConfig& config);

}  // namespace fedmuscle
