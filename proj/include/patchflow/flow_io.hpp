#pragma once

#include <filesystem>

#include "patchflow/flow_field.hpp"

namespace patchflow {

// Middlebury interchange format: 4-byte magic "PIEH", little-endian int32
// width and height, then row-major interleaved float32 (u,v) pairs.
// Validity masks do not travel in this format; read_flo returns all-valid.
void write_flo(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flo(const std::filesystem::path& path);

}  // namespace patchflow
