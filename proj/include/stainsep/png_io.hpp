#pragma once

#include <string>

#include "stainsep/image.hpp"

namespace stainsep {

// 8-bit RGB PNG in, [0,1] float image out (alpha dropped, gray expanded)
Image read_png(const std::string& path);

// values clamped to [0,1] and quantized to 8-bit RGB
void write_png(const std::string& path, const Image& img);

}  // namespace stainsep
