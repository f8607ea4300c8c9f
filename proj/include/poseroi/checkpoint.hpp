#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "poseroi/params.hpp"

namespace poseroi {

inline constexpr int kCheckpointVersion = 1;

/// Everything a run needs to resume: weights, momentum buffers, the number of
/// completed iterations and the resolved configuration as JSON text.
struct Checkpoint {
  std::int64_t iteration = 0;
  std::string config_json = "{}";
  ParameterStore weights;
  std::map<std::string, Tensor> velocity;

  bool operator==(const Checkpoint&) const = default;
};

/// File layout: a "POSEROI-CHECKPOINT <version>" line, the byte length of a
/// JSON header on its own line, the header (tensor names, shapes, payload
/// FNV-1a), then every tensor as little-endian fp64. Written to a temporary
/// file and renamed into place.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);

/// Validates the whole file before returning anything. DataError on a wrong
/// magic or version, truncation or checksum mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies saved weights into a store built for the current configuration.
/// ShapeError names the first tensor that is missing, extra or mis-shaped.
void restore_weights(ParameterStore& target, const Checkpoint& checkpoint);

}  // namespace poseroi
