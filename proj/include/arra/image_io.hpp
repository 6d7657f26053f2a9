#pragma once

#include <filesystem>

#include "arra/tensor.hpp"

namespace arra::corpus {

// 8-bit RGB PNG <-> H x W x 3 tensor with values in [0,1] (byte / 255).
num::Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const num::Tensor& image);

// center crop to square, then nearest-neighbor to canvas x canvas
num::Tensor resize_to_canvas(const num::Tensor& image, int canvas);

}  // namespace arra::corpus
