#pragma once

#include "advspde/types.hpp"

#include <cstdint>
#include <random>

namespace advspde {

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Counter-based stream key: the draws for (seed, stream, step) never depend on
/// how many draws other keys consumed, so results are independent of thread count.
std::uint64_t stream_key(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) noexcept;

/// Standard normal vector of length n for the given key.
Vector standard_normal(std::uint64_t key, int n);

/// Uniform [0, 1) vector of length n for the given key.
Vector uniform01(std::uint64_t key, int n);

/// Rademacher (+1/-1) vector of length n for the given key.
Vector rademacher(std::uint64_t key, int n);

}  // namespace advspde
