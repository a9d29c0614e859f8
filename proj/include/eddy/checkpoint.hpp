#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <vector>

#include "eddy/symmetricnet.hpp"

namespace eddy {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Layout (little-endian): "EDYW", u16 version, u32 tensor count, then per tensor
// u32 name length, UTF-8 name, u8 ndim, ndim x u32 dims, f32 payload.
void write_tensors(std::ostream& out, const std::vector<NamedTensor<float>>& tensors);
std::vector<NamedTensor<float>> read_tensors(std::istream& in);

/// Writes parameters then batch-norm running statistics in the network's fixed order.
void save_checkpoint(const std::filesystem::path& path, const Network<float>& net);

/// Loads a checkpoint into a network built from `spec`; throws on any name or dims mismatch.
Network<float> load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec);

}  // namespace eddy
