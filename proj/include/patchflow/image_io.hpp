#pragma once

#include <filesystem>

#include "patchflow/image.hpp"

namespace patchflow {

// 8-bit RGB image files. Format chosen by extension: .png or .ppm (binary
// P6). Values are quantized with round(v*255) on write and mapped back as
// v/255 on read, so the write/read error is at most 1/510 per channel.
void write_image(const std::filesystem::path& path, const Image& image);
Image read_image(const std::filesystem::path& path);

}  // namespace patchflow
