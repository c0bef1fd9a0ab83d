#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vicl/backbone.hpp"
#include "vicl/params.hpp"
#include "vicl/rng.hpp"

namespace vicl {

// On-disk model state. Binary layout (little-endian):
//   magic "VICL", format version u32, tensor count u32,
//   per tensor: name length u16, name bytes, frozen flag u8, rank u8,
//               dims u64 each, f32 data,
//   config echo length u32 + JSON bytes, rng state (32 bytes), step u64.
// Optimizer moments ride along as "opt.m.<name>" / "opt.v.<name>" tensors so a
// resumed run continues bit-exact. save -> load -> save is byte-identical.
struct Checkpoint {
    uint32_t version = 1;
    ParamStore tensors;  // model parameters followed by optimizer moments
    std::string config_echo;
    std::array<uint8_t, Rng::kStateBytes> rng_state{};
    uint64_t step = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds the model from the checkpoint's config echo and tensor table.
// Frozen flags are restored; optimizer tensors are ignored here.
Model model_from_checkpoint(const Checkpoint& ck);

// Names of model tensors marked frozen in `after` whose bytes differ from (or
// are missing in) `before`. Empty means the freeze held.
std::vector<std::string> freeze_check(const Checkpoint& before, const Checkpoint& after);

}  // namespace vicl
