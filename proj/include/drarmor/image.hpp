#pragma once

#include <filesystem>
#include <string>

#include "drarmor/tensor.hpp"

namespace drarmor {

// Mean SSIM over 8x8 windows at stride 1 (smaller images use one window per
// axis of the full extent). Accepts (H, W) or (C, H, W); channels are averaged.
double ssim(const Tensor& a, const Tensor& b, double dynamic_range = 1.0);

// Binary P5 with maxval 255 after per-image min-max scaling. A (C, H, W)
// tensor is laid out as C tiles side by side.
std::string encode_pgm(const Tensor& image);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

// Parses a P5 image back into [0, 1] values, shape (H, W).
Tensor decode_pgm(const std::string& bytes);

}  // namespace drarmor
