#pragma once

// Simulated transmission format. All values are 32-bit little-endian floats;
// integers in the package header are 32-bit little-endian.
//
//   representation: B*d values, row-major
//   package:        owner, M, selected ids (ascending, M entries), B, d,
//                   then B^M*d values of S (row-major, lexicographic tuple
//                   order) and B^M alpha values

#include "fedmuscle/muscle.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace fedmuscle {

inline constexpr std::size_t kWireValueBytes = 4;

std::vector<std::uint8_t> encode_representation(const RepresentationBatch& z);
RepresentationBatch decode_representation(std::span<const std::uint8_t> bytes,
                                          std::size_t batch_size, std::size_t dim);

std::vector<std::uint8_t> encode_package(const AggregatePackage& pkg);
AggregatePackage decode_package(std::span<const std::uint8_t> bytes);

}  // namespace fedmuscle
