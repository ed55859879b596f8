#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dmloc/tensor.hpp"

namespace dmloc {

/// 8-bit greyscale raster, row-major.
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;
};

GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// [0,255] -> [-1,1] as a [1,H,W] tensor, and back (values clipped).
Tensor gray_to_tensor(const GrayImage& image);
GrayImage tensor_to_gray(const Tensor& image);

}  // namespace dmloc
