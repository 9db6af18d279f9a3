#pragma once

#include "svsplat/tensor.hpp"

#include <filesystem>

namespace svsplat {

// CTST container: "CTST" magic, version byte 1, dtype code byte
// (0 = f32, 1 = f64), rank byte, rank u64 little-endian extents, then the
// row-major little-endian payload. The normative layout lives in
// docs/format.md.

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

template <typename T>
void write_array(const std::filesystem::path& path, const TArr<T>& a, Dtype dt) {
    write_tensor(path, Tensor::from_array(a, dt));
}

} // namespace svsplat
