#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace gmoe {

// Minimal PNG writer (8-bit RGB, stored deflate blocks). Enough for static
// heatmaps without pulling in an image library.
void write_png_rgb(const std::filesystem::path& path, std::size_t width,
                   std::size_t height, const std::uint8_t* rgb);

// Heatmap of a row-major matrix with a fixed color ramp; each cell becomes a
// cell_px x cell_px block.
void write_heatmap_png(const std::filesystem::path& path,
                       const std::vector<std::vector<double>>& matrix,
                       std::size_t cell_px = 32);

}  // namespace gmoe
