// SPDX-License-Identifier: Apache-2.0
//
// 8-bit PNG read/write (libpng). 16-bit and HDR inputs are rejected.

#pragma once

#include <string>

#include "clearair/image.hpp"

namespace clearair {

ImageTensor read_png(const std::string& path);
void write_png(const std::string& path, const ImageTensor& img);

} // namespace clearair
