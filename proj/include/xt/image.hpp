#pragma once

#include <filesystem>
#include <span>

#include "xt/tensor.hpp"

namespace xt {

// Reads a binary 8-bit PGM (P5) or PPM (P6) as [C, H, W] scaled to [0, 1].
Tensor read_pnm(const std::filesystem::path& path);

// Writes [H, W] values in [0, 1] as an 8-bit binary PGM (values are clamped).
void write_pgm(const std::filesystem::path& path, std::span<const double> values,
               std::size_t height, std::size_t width);

/// Loads an image from a tensor file (rank 2 [H, W] or rank 3 [C, H, W]) or
/// a PGM/PPM file. Throws InvalidNumerics on non-finite pixels.
Tensor load_image(const std::filesystem::path& path);

}  // namespace xt
