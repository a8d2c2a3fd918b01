#pragma once

#include <string>
#include <vector>

#include "hourglass/nn.hpp"

namespace hourglass {

// Versioned binary weight container: magic, format version, config hash,
// training step, then named blobs (length-prefixed name, dims, float64
// payload, little-endian).
struct CheckpointData {
  uint32_t version = 1;
  uint64_t config_hash = 0;
  uint64_t step = 0;
  std::vector<std::pair<std::string, Tensor>> blobs;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint_file(const std::string& path);

enum class LoadPolicy {
  kStrict,  // every target parameter must be restored
  kByName,  // copy the name intersection, keep the rest fresh
};

struct LoadReport {
  std::vector<std::string> copied;
  std::vector<std::string> skipped_source;  // blob present only in the file
  std::vector<std::string> fresh_target;    // parameter left at initialization
};

// Copies matching blobs into the parameter store. A name present on both
// sides with different shapes is always a hard error.
LoadReport apply_checkpoint(const CheckpointData& data, ParamStore& params, LoadPolicy policy);

// Raw tensor file: magic, dims, row-major float64 payload. The feature-file
// format used by the corpus on disk.
void write_tensor_file(const std::string& path, std::span<const double> values,
                       const Shape& shape);
std::pair<Shape, std::vector<double>> read_tensor_file(const std::string& path);

}  // namespace hourglass
