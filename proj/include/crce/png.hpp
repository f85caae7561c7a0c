#pragma once

#include <cstdint>
#include <vector>

namespace crce {

/// 8-bit grayscale PNG, rows top to bottom.
std::vector<std::uint8_t> encode_png_gray(const std::vector<std::uint8_t>& pixels, int width, int height);

/// Renders a 2-D point as a dot on a `size`x`size` canvas covering [-extent, extent]^2.
std::vector<std::uint8_t> render_point_png(double x, double y, int size = 64, double extent = 4.0);

} // namespace crce
