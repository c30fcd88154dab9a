// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fersnet/tensor.hpp"

namespace fersnet {

struct GrayImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

void png_write_gray(const std::string& path, const GrayImage& img);
GrayImage png_read_gray(const std::string& path);

/// 8-bit pixel -> [-1,1]: p / 127.5 - 1.
Tensor<float> image_to_tensor(const GrayImage& img);

/// [-1,1] -> 8-bit, clamped round of (v + 1) * 127.5. Accepts [1,H,W] or [H,W].
GrayImage tensor_to_image(const Tensor<float>& t);

}  // namespace fersnet
