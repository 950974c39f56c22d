#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "flowseg/embed_net.hpp"

namespace flowseg {

// Checkpoint layout (all integers little-endian uint32):
//   "FSCK" | version (=1) | tensor count
//   per tensor: rows | cols | rows*cols float32 values, column-major
// Tensors appear in Param order. Adam state is not stored.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::byte> encode_checkpoint(const NetParams<float>& params);
/// Throws BadMagic, Truncated, Malformed (version/count/shape mismatch) or NonFinite.
NetParams<float> decode_checkpoint(std::span<const std::byte> bytes);

void save_checkpoint(const std::filesystem::path& path, const NetParams<float>& params);
NetParams<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace flowseg
