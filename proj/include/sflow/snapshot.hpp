#pragma once

#include <filesystem>
#include <iosfwd>

#include "sflow/tensor.hpp"

namespace sflow {

// Snapshot layout: four little-endian u32 extents (B, C, H, W) followed by
// B*C*H*W little-endian IEEE-754 doubles. Several snapshots may be stored
// back to back in one stream.

void write_snapshot(std::ostream& os, const Tensor& t);
Tensor read_snapshot(std::istream& is);

void save_snapshot(const std::filesystem::path& path, const Tensor& t);
Tensor load_snapshot(const std::filesystem::path& path);

}  // namespace sflow
