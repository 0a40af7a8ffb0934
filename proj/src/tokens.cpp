#include "sketchgen/tokens.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "sketchgen/errors.hpp"
#include "sketchgen/rng.hpp"

namespace sketchgen {

void Codebook::validate() const {
    if (patch_side <= 0) throw ConfigError("codebook: patch_side must be positive");
    if (size() < 2) throw ConfigError("codebook: need at least 2 entries");
    const std::size_t len = static_cast<std::size_t>(patch_side) * patch_side;
    for (const auto& e : entries) {
        if (e.size() != len) throw ConfigError("codebook: entry size mismatch");
        for (double v : e)
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("codebook: pixel outside [0,1]");
    }
    for (double v : entries[0])
        if (v != 0.0) throw ConfigError("codebook: entry 0 must be all zeros");
    for (int i = 0; i < size(); ++i)
        for (int j = i + 1; j < size(); ++j)
            if (entries[i] == entries[j]) throw ConfigError("codebook: duplicate entries");
}

Codebook make_default_codebook(int patch_side) {
    if (patch_side < 4 || patch_side % 2 != 0)
        throw ConfigError("default codebook requires an even patch_side >= 4");
    const int p = patch_side;
    Codebook cb;
    cb.patch_side = p;
    auto add = [&](auto&& member) {
        std::vector<double> patch(static_cast<std::size_t>(p) * p, 0.0);
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < p; ++j)
                if (member(i, j)) patch[static_cast<std::size_t>(i) * p + j] = 1.0;
        cb.entries.push_back(std::move(patch));
    };
    add([](int, int) { return false; });                    // 0: empty
    add([](int, int) { return true; });                     // 1: full
    add([p](int, int j) { return j < p / 2; });             // left half
    add([p](int, int j) { return j >= p / 2; });            // right half
    add([p](int i, int) { return i < p / 2; });             // top half
    add([p](int i, int) { return i >= p / 2; });            // bottom half
    for (int r = 0; r < p; ++r) add([r](int i, int) { return i == r; });  // h-lines
    for (int c = 0; c < p; ++c) add([c](int, int j) { return j == c; });  // v-lines
    add([p](int i, int j) { return i + j >= p - 1; });      // lower-right triangle
    add([p](int i, int j) { return i + j <= p - 2; });      // upper-left triangle
    cb.validate();
    return cb;
}

TokenGrid encode_raster(const Raster& image, const Codebook& codebook) {
    codebook.validate();
    const int p = codebook.patch_side;
    if (image.height <= 0 || image.width <= 0 || image.height % p != 0 || image.width % p != 0)
        throw ShapeError("encode_raster: image dimensions must be positive multiples of patch side");
    TokenGrid grid(image.height / p, image.width / p);
    std::vector<double> patch(static_cast<std::size_t>(p) * p);
    for (int gr = 0; gr < grid.height; ++gr) {
        for (int gc = 0; gc < grid.width; ++gc) {
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < p; ++j)
                    patch[static_cast<std::size_t>(i) * p + j] =
                        image.at(gr * p + i, gc * p + j) / 255.0;
            int best = 0;
            double best_dist = std::numeric_limits<double>::infinity();
            for (int k = 0; k < codebook.size(); ++k) {
                const auto& entry = codebook.entries[k];
                double d = 0.0;
                for (std::size_t t = 0; t < patch.size(); ++t) {
                    const double diff = patch[t] - entry[t];
                    d += diff * diff;
                }
                if (d < best_dist) {
                    best_dist = d;
                    best = k;
                }
            }
            grid.at(gr, gc) = best;
        }
    }
    return grid;
}

Raster decode_tokens(const TokenGrid& grid, const Codebook& codebook) {
    codebook.validate();
    if (grid.height <= 0 || grid.width <= 0 || grid.count() != static_cast<int>(grid.tokens.size()))
        throw ShapeError("decode_tokens: malformed grid");
    const int p = codebook.patch_side;
    Raster img(grid.height * p, grid.width * p);
    for (int gr = 0; gr < grid.height; ++gr) {
        for (int gc = 0; gc < grid.width; ++gc) {
            const int tok = grid.at(gr, gc);
            if (tok == codebook.mask_token())
                throw InputError("decode_tokens: masked token present");
            if (tok < 0 || tok > codebook.mask_token())
                throw InputError("decode_tokens: token index out of range");
            const auto& entry = codebook.entries[tok];
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < p; ++j)
                    img.at(gr * p + i, gc * p + j) = static_cast<uint8_t>(
                        std::lround(entry[static_cast<std::size_t>(i) * p + j] * 255.0));
        }
    }
    return img;
}

namespace {

// Shape membership in canonical coordinates (shape frame, unit scale).
bool in_family(int family, double u, double v) {
    switch (family) {
        case 0:  // disk
            return u * u + v * v <= 1.0;
        case 1:  // square
            return std::max(std::abs(u), std::abs(v)) <= 0.9;
        case 2: {  // triangle, apex up
            if (v > 0.75 || v < -1.0) return false;
            return std::abs(u) <= 0.55 * (v + 1.0);
        }
        case 3:  // cross
            return (std::abs(u) <= 0.35 && std::abs(v) <= 1.0) ||
                   (std::abs(v) <= 0.35 && std::abs(u) <= 1.0);
        case 4: {  // ring
            const double r2 = u * u + v * v;
            return r2 <= 1.0 && r2 >= 0.55 * 0.55;
        }
        case 5:  // diamond
            return std::abs(u) + std::abs(v) <= 1.1;
        case 6:  // horizontal bar
            return std::abs(u) <= 1.15 && std::abs(v) <= 0.4;
        case 7:  // vertical bar
            return std::abs(v) <= 1.15 && std::abs(u) <= 0.4;
        case 8:  // ellipse
            return (u * u) / (1.2 * 1.2) + (v * v) / (0.55 * 0.55) <= 1.0;
        case 9:  // eight-pointed star: square union diamond
            return std::max(std::abs(u), std::abs(v)) <= 0.72 || std::abs(u) + std::abs(v) <= 1.15;
        default:
            throw ConfigError("unknown shape family");
    }
}

// Per-family rotation range; axis-bound families only jitter.
double draw_rotation(int family, Rng& rng) {
    switch (family) {
        case 0:
        case 4:
            return 0.0;  // rotationally symmetric
        case 6:
        case 7:
            return rng.uniform(-0.25, 0.25);
        default:
            return rng.uniform(0.0, 2.0 * M_PI);
    }
}

Raster rasterize_filled(int family, int side, Rng& rng) {
    const double cx = rng.uniform(0.38, 0.62) * side;
    const double cy = rng.uniform(0.38, 0.62) * side;
    const double scale = rng.uniform(0.15, 0.27) * side;
    const double theta = draw_rotation(family, rng);
    const double ct = std::cos(theta), st = std::sin(theta);
    Raster img(side, side);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const double dx = (x + 0.5 - cx) / scale;
            const double dy = (y + 0.5 - cy) / scale;
            const double u = ct * dx + st * dy;
            const double v = -st * dx + ct * dy;
            if (in_family(family, u, v)) img.at(y, x) = 255;
        }
    }
    return img;
}

// filled AND NOT eroded(filled), 4-neighbourhood; out-of-range counts as 0.
Raster boundary_of(const Raster& filled) {
    Raster sketch(filled.height, filled.width);
    auto on = [&](int y, int x) {
        return y >= 0 && y < filled.height && x >= 0 && x < filled.width && filled.at(y, x) != 0;
    };
    for (int y = 0; y < filled.height; ++y)
        for (int x = 0; x < filled.width; ++x)
            if (on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)))
                sketch.at(y, x) = 255;
    return sketch;
}

}  // namespace

std::vector<ShapeSample> generate_dataset(int num_samples, int num_classes, int image_side,
                                          uint64_t seed, int patch_side) {
    if (num_samples < 0) throw ConfigError("generate_dataset: negative sample count");
    if (num_classes < 2 || num_classes > kMaxShapeClasses)
        throw ConfigError("generate_dataset: num_classes must be in [2, 10]");
    if (patch_side <= 0 || image_side <= 0 || image_side % patch_side != 0)
        throw ConfigError("generate_dataset: image_side must be a positive multiple of patch_side");
    std::vector<ShapeSample> samples;
    samples.reserve(static_cast<std::size_t>(num_samples));
    for (int i = 0; i < num_samples; ++i) {
        const int cls = i % num_classes;
        Rng rng(derive_seed(seed, Stream::kDataset, static_cast<uint64_t>(i)));
        ShapeSample s;
        s.class_label = cls;
        s.filled = rasterize_filled(cls, image_side, rng);
        s.sketch = boundary_of(s.filled);
        samples.push_back(std::move(s));
    }
    return samples;
}

void save_dataset(const std::vector<ShapeSample>& samples, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("save_dataset: cannot write manifest in " + dir.string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%05zu", i);
        const std::string filled = std::string(name) + "_filled.pgm";
        const std::string sketch = std::string(name) + "_sketch.pgm";
        save_raster(samples[i].filled, dir / filled);
        save_raster(samples[i].sketch, dir / sketch);
        manifest << filled << " " << sketch << " " << samples[i].class_label << "\n";
    }
    if (!manifest) throw IoError("save_dataset: manifest write failed");
}

std::vector<ShapeSample> load_dataset(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw IoError("load_dataset: cannot open manifest in " + dir.string());
    std::vector<ShapeSample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string filled, sketch;
        int cls = 0;
        if (!(ss >> filled >> sketch >> cls))
            throw ParseError("load_dataset: malformed manifest line " + std::to_string(line_no));
        ShapeSample s;
        s.filled = load_raster(dir / filled);
        s.sketch = load_raster(dir / sketch);
        s.class_label = cls;
        if (!s.filled.same_shape(s.sketch))
            throw ShapeError("load_dataset: filled/sketch size mismatch at line " +
                             std::to_string(line_no));
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace sketchgen
