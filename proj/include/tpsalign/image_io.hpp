#pragma once

#include <string>

#include "tpsalign/tensor.hpp"

namespace tpsalign {

// Binary PGM (P5, maxval 255). Values in [0,1] quantize to bytes on write and
// map back to v/255 on read. Throws IoError on filesystem problems and
// ConfigError on malformed headers.
void write_pgm(const std::string& path, const Tensor& image);  // H x W
Tensor read_pgm(const std::string& path);                      // H x W

// Binary PPM (P6). image is H x W x 3 in [0,1].
void write_ppm(const std::string& path, const Tensor& image);

}  // namespace tpsalign
