#pragma once

// Binary parameter checkpoints.
//
// Layout (all integers and floats little-endian):
//   "EBMC"            4 magic bytes
//   u32 version       currently 1
//   repeated until end of file:
//     u32 name_len, name bytes (UTF-8)
//     u32 rank, rank x u64 dims
//     product(dims) x f64 data

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebmcal/tensor.hpp"

namespace ebmcal {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint data into existing tensors by name; shapes must agree and
// every destination must be present in the file.
void restore_into(const std::vector<NamedTensor>& saved, std::vector<NamedTensor>& dest);

}  // namespace ebmcal
