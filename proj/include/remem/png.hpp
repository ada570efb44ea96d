#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "remem/tensor.hpp"

namespace remem::png {

/// Maps [-1, 1] to [0, 255] by (x + 1) * 127.5, rounding half to even, clamped.
std::uint8_t to_byte(float x);

/// 8-bit RGB PNG of a 3 x H x W image with values in [-1, 1].
std::string encode(const Tensor& image);

void write(const std::filesystem::path& path, const Tensor& image);

/// Tiles equally sized images into a grid with `columns` columns and a
/// one-pixel separator of value -1.
Tensor contact_sheet(const std::vector<Tensor>& images, int columns);

}  // namespace remem::png
