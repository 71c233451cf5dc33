#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fairproto {

using Rng = std::mt19937_64;

/// Deterministic seed splitting. Every consumer of randomness draws from a
/// named sub-stream of the run seed, so adding draws in one stream never
/// shifts another:
///
///   derive_seed(seed, "sampler")          episode sampling
///   derive_seed(seed, "dropout")          dropout masks
///   derive_seed(seed, "validation")       frozen validation episodes
///   derive_seed(seed, "init")             head initialization
///   derive_seed(seed, "protocol", trial)  evaluation trials
std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t base, std::string_view stream, std::uint64_t index = 0) {
    return Rng(derive_seed(base, stream, index));
}

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace fairproto
