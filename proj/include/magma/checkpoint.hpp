#pragma once

#include <string>
#include <vector>

#include "magma/tensor.hpp"

namespace magma {

struct NamedTensor {
  std::string name;
  Tensor value;
};

// "MGWT" checkpoint: magic, u32 version, then per tensor
// (u32 name length, UTF-8 name, u32 rank, u32 extents[rank], f64 payload),
// all little-endian, records back to back until end of file.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

}  // namespace magma
