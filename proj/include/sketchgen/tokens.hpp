#pragma once

/**
 * Token-grid domain: fixed-codebook patch quantizer, synthetic shape
 * dataset, and the on-disk dataset manifest.
 *
 * The tokenizer is deliberately not learned. A fixed codebook of binary
 * P x P patches keeps encode/decode exactly invertible on in-distribution
 * images, so everything downstream can be tested bit-for-bit.
 */

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sketchgen/raster.hpp"

namespace sketchgen {

// Fixed dictionary of P x P patches with values in [0, 1].
// Index K (== entries.size()) is the reserved MASK token, outside the
// codebook proper.
struct Codebook {
    int patch_side = 0;
    std::vector<std::vector<double>> entries;  // each patch_side^2 long

    int size() const { return static_cast<int>(entries.size()); }
    int mask_token() const { return size(); }

    // Throws ConfigError if K < 2, entry 0 is not all-zeros, or any two
    // entries coincide.
    void validate() const;
};

// Default codebook: zeros, ones, four half-planes, one-pixel lines at every
// row/column, and two diagonal triangles. K = 2 * patch_side + 8 (16 for the
// default patch_side 4). Requires an even patch_side >= 4 so all entries are
// distinct.
Codebook make_default_codebook(int patch_side = 4);

// H x W grid of codebook indices; index == K means masked.
struct TokenGrid {
    int height = 0;
    int width = 0;
    std::vector<int> tokens;
    int class_label = 0;

    TokenGrid() = default;
    TokenGrid(int h, int w, int fill = 0, int cls = 0)
        : height(h), width(w), tokens(static_cast<std::size_t>(h) * w, fill), class_label(cls) {}

    int count() const { return height * width; }
    int& at(int row, int col) { return tokens[static_cast<std::size_t>(row) * width + col]; }
    int at(int row, int col) const { return tokens[static_cast<std::size_t>(row) * width + col]; }
    bool operator==(const TokenGrid& other) const = default;
};

// One synthetic record: filled shape raster, its outline, and the class id.
struct ShapeSample {
    Raster filled;
    Raster sketch;
    int class_label = 0;
};

inline constexpr int kMaxShapeClasses = 10;

// Deterministic synthetic dataset. Each class is a parametric shape family
// (disk, square, triangle, cross, ring, ...) with randomized position, scale
// and rotation; the sketch is the one-pixel morphological boundary of the
// filled raster (filled AND NOT eroded). Sample i draws from an RNG stream
// derived from (seed, i), so the dataset is a pure function of its arguments.
std::vector<ShapeSample> generate_dataset(int num_samples, int num_classes, int image_side,
                                          uint64_t seed, int patch_side = 4);

// Nearest-codebook-entry quantization: each P x P patch maps to the entry
// with minimal sum of squared pixel differences, ties to the lowest index.
TokenGrid encode_raster(const Raster& image, const Codebook& codebook);

// Tiles codebook patches back into a raster. Throws InputError if any token
// is the MASK index.
Raster decode_tokens(const TokenGrid& grid, const Codebook& codebook);

// Dataset directory layout: one PGM pair per sample plus a line-oriented
// manifest ("<filled> <sketch> <class>" per record).
void save_dataset(const std::vector<ShapeSample>& samples, const std::filesystem::path& dir);
std::vector<ShapeSample> load_dataset(const std::filesystem::path& dir);

}  // namespace sketchgen
