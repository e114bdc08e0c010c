#pragma once

#include <string>

#include "parkgauss/image.hpp"

namespace parkgauss {

// 8-bit PNG. Values are mapped [0,1] <-> [0,255]; writing clamps first.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// Raw float image container ("PGIM"): header {magic, version=1, height u32,
// width u32, channels u32} followed by channel-major f32 planes.
void write_pgim(const std::string& path, const Image& img);
Image read_pgim(const std::string& path);

// Heatmap container ("PGHM"): identical layout to PGIM under a different
// magic, used for detector fields and external heatmaps.
void write_pghm(const std::string& path, const Image& img);
Image read_pghm(const std::string& path);

}  // namespace parkgauss
