#pragma once

#include <stdexcept>
#include <string>

#include "magma/vit.hpp"

namespace magma::testing {

// 8x8 two-channel images, 4 patches, two encoder blocks of width 8.
inline VitConfig toy_config() {
  VitConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 2;
  c.enc_depth = 2;
  c.enc_dim = 8;
  c.enc_heads = 2;
  c.dec_depth = 1;
  c.dec_dim = 8;
  c.dec_heads = 2;
  c.mlp_ratio = 2;
  c.mask_ratio = 0.5;
  return c;
}

inline Tensor find_param(const VitMae& m, const std::string& name) {
  for (const auto& p : m.parameters())
    if (p.name == name) return p.value;
  throw std::runtime_error("no parameter " + name);
}

}  // namespace magma::testing
