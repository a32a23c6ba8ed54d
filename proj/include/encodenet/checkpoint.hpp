#pragma once

#include <cstdint>
#include <filesystem>

#include "encodenet/network.hpp"

namespace encodenet {

// Byte layout (all integers little-endian):
//   "ENCNETCK"  u32 version  u32 flags (bit 0: trained)
//   u32 spec_len  spec text (serialize_model_spec)
//   u32 tensor_count, then per tensor:
//     u16 name_len  name  u8 rank  u32 dims[rank]  f32 data[prod(dims)]
//   u32 crc32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Writes to a temporary sibling and renames, so readers never see a partial
// file.
void save_checkpoint(const std::filesystem::path& path, const Network& net);

// Rebuilds the network from the embedded spec.
Network load_checkpoint(const std::filesystem::path& path);

// Loads into an existing network; the embedded spec must match its spec.
void load_checkpoint_into(const std::filesystem::path& path, Network& net);

}  // namespace encodenet
