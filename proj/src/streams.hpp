#pragma once

#include <cstdint>

namespace fedmuscle::streams {

// Phase tags for SeededRng stream derivation.
enum : std::uint64_t {
  kWorld = 0x11,
  kLocalData = 0x12,
  kTestData = 0x13,
  kPublicLatent = 0x14,
  kPublicView = 0x15,
  kPublicShuffle = 0x16,
  kDirichlet = 0x17,
  kModelInit = 0x21,
  kLocalShuffle = 0x22,
  kSelection = 0x23,
};

}  // namespace fedmuscle::streams
