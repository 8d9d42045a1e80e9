#pragma once

#include <map>
#include <string>

#include "sseg/tensor.hpp"

namespace sseg {

/// Named double-precision arrays plus a free-form JSON metadata string.
/// Serialized as: 8-byte magic "SSEGCKPT", u32 version, u64 metadata length,
/// metadata bytes, u32 array count, then per array a length-prefixed name,
/// rank, dims, and raw little-endian float64 data. The map keeps names sorted
/// so files are byte-stable.
struct ArrayStore {
    std::string meta_json = "{}";
    std::map<std::string, Tensor> arrays;
};

/// Writes atomically (temp file then rename).
void save_arrays(const std::string& path, const ArrayStore& store);

ArrayStore load_arrays(const std::string& path);

}  // namespace sseg
