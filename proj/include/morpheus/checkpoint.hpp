#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "morpheus/tensor.hpp"

namespace morpheus::trainer {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  nn::Matrix value;
};

// Magic, version, payload size and FNV-1a checksum, then the payload: a JSON
// metadata block and a table of named tensors stored as row-major
// little-endian 32-bit floats.
struct CheckpointFile {
  std::string metadata;
  std::vector<TensorRecord> tensors;

  const nn::Matrix* find(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(const std::string& bytes);

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

}  // namespace morpheus::trainer
