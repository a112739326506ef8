#pragma once

// Property suites runnable from the command line. Each property reports the
// measured error next to the tolerance it is held to.

#include "fedmuscle/muscle.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace fedmuscle {

enum class VerifySuite { identities, gradients, oracle, bound };

VerifySuite parse_suite(const std::string& name);
std::string to_string(VerifySuite suite);

struct VerifyOptions {
  std::uint64_t seed = 20250101;
  /// Negative control: flips the sign of the subtracted term in gamma.
  bool corrupt_gamma_sign = false;
};

struct PropertyResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

std::vector<PropertyResult> run_verify_suite(VerifySuite suite, const VerifyOptions& options);

/// B×d matrix of independent uniformly distributed unit rows.
Matrix random_unit_batch(SeededRng& rng, std::size_t rows, std::size_t dim);

}  // namespace fedmuscle
