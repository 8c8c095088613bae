#pragma once

#include <filesystem>
#include <iosfwd>

#include "xt/tensor.hpp"

namespace xt {

// Binary tensor file: "XTT1", u8 dtype (0 = f64, 1 = f32), u8 rank,
// rank x u64 little-endian extents, then the row-major little-endian payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace xt
