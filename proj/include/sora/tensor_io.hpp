#pragma once

#include "sora/tensor.hpp"

#include <string>

namespace sora {

// Binary tensor container. Layout, all little-endian:
//   bytes 0-3   magic "SORA"
//   byte  4     format version, currently 1
//   byte  5     rank
//   then        rank x u64 extents
//   then        row-major f64 payload
// Round trips are bit-exact. Writes go to a temp file in the same directory
// followed by a rename, so readers never observe a half-written artifact.
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// Atomic small-file write used for every artifact the pipeline produces.
void write_file_atomic(const std::string& path, const std::string& bytes);

} // namespace sora
