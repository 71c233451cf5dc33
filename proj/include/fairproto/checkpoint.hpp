#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

#include "fairproto/optim.hpp"
#include "fairproto/protonet.hpp"

namespace fairproto {

// Head checkpoint, little-endian, no padding:
//
//   "FPHD" | u16 version=1 | u32 input | u32 hidden | u32 output
//   f64 row-major: w1, b1, bn1.{gamma, beta, running_mean, running_var},
//                  w2, b2, bn2.{gamma, beta, running_mean, running_var}
//   f64 verif_scale | f64 verif_bias
//
// optionally followed by the optimizer section:
//
//   "FPOP" | u16 version=1 | u64 t | f64 beta1 | f64 beta2 | f64 eps
//   u64 n | n x f64 m | n x f64 v

inline constexpr std::array<char, 4> kHeadMagic = {'F', 'P', 'H', 'D'};
inline constexpr std::array<char, 4> kOptimizerMagic = {'F', 'P', 'O', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
    HeadParams params;
    std::optional<AdamState> optimizer;
};

std::uint64_t save_checkpoint(const HeadParams& params, const AdamState* optimizer, std::ostream& sink);
Checkpoint load_checkpoint(std::istream& source);

std::uint64_t save_checkpoint_file(const HeadParams& params, const AdamState* optimizer,
                                   const std::filesystem::path& path);
Checkpoint load_checkpoint_file(const std::filesystem::path& path);

}  // namespace fairproto
