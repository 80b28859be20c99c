#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "debias/nn.hpp"

namespace debias {

/// Binary checkpoint layout (little-endian):
///
///   "DBLB"                      4 bytes
///   u32 version                 currently 1
///   u32 layer count             hidden layers + task head
///   u8  has rotation head
///   per layer, then the rotation head when present:
///     u32 fan_in, u32 fan_out, u8 activation
///     f64[fan_in * fan_out] weight (row-major), f64[fan_out] bias
///   u8  has optimizer state
///   when present: u64 step, f64 lr, beta1, beta2, epsilon,
///     then first moments and second moments in the layer order above
///     (weights row-major followed by biases, no repeated dims).
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    MlpModel model;
    std::optional<AdamState> optimizer;
};

/// Written to a temporary sibling and renamed into place.
void write_checkpoint(const std::filesystem::path& path, const MlpModel& model,
                      const AdamState* optimizer = nullptr);

/// Throws FormatError on bad magic, unsupported version or truncation.
Checkpoint read_checkpoint(const std::filesystem::path& path);

} // namespace debias
