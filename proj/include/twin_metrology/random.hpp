// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace twin_metrology {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: the value at a counter is a pure function of
/// (seed, stream, counter), so draws never depend on evaluation order.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::uint64_t stream) noexcept
      : key_(mix64(seed ^ mix64(stream ^ 0x243f6a8885a308d3ULL))) {}

  /// Independent child stream, e.g. one per source.
  [[nodiscard]] constexpr CounterRng split(std::uint64_t child) const noexcept {
    return CounterRng(key_, child, 0);
  }

  [[nodiscard]] constexpr std::uint64_t bits(std::uint64_t counter) const noexcept {
    return mix64(key_ ^ mix64(counter));
  }

  /// Uniform on [0, 1) with 53 random bits.
  [[nodiscard]] constexpr double uniform(std::uint64_t counter) const noexcept {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  /// Uniform on [-1, 1).
  [[nodiscard]] constexpr double symmetric(std::uint64_t counter) const noexcept {
    return 2.0 * uniform(counter) - 1.0;
  }

 private:
  constexpr CounterRng(std::uint64_t parent, std::uint64_t child, int) noexcept
      : key_(mix64(parent + mix64(child ^ 0x13198a2e03707344ULL))) {}

  std::uint64_t key_;
};

}  // namespace twin_metrology
