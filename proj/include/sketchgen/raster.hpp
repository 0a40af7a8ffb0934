#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sketchgen {

// 8-bit grayscale raster, row-major.
struct Raster {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> px;

    Raster() = default;
    Raster(int h, int w, uint8_t fill = 0)
        : height(h), width(w), px(static_cast<std::size_t>(h) * w, fill) {}

    uint8_t& at(int row, int col) { return px[static_cast<std::size_t>(row) * width + col]; }
    uint8_t at(int row, int col) const { return px[static_cast<std::size_t>(row) * width + col]; }

    bool same_shape(const Raster& other) const {
        return height == other.height && width == other.width;
    }
    bool operator==(const Raster& other) const = default;
};

// Binary PGM (P5, maxval 255). Lossless for 8-bit grayscale.
void save_raster(const Raster& img, const std::filesystem::path& path);
Raster load_raster(const std::filesystem::path& path);

// Grayscale 8-bit PNG export (zlib-compressed, no filtering).
void save_png(const Raster& img, const std::filesystem::path& path);

}  // namespace sketchgen
