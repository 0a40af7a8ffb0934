#include "sketchgen/raster.hpp"

#include <zlib.h>

#include <array>
#include <cstring>
#include <fstream>
#include <string>

#include "sketchgen/errors.hpp"

namespace sketchgen {

namespace {

// Reads one whitespace-delimited PGM header token, skipping '#' comments.
std::string next_header_token(std::istream& in) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    return tok;
}

int parse_header_int(std::istream& in, const char* what) {
    const std::string tok = next_header_token(in);
    if (tok.empty()) throw ParseError(std::string("pgm: missing ") + what);
    int value = 0;
    for (char ch : tok) {
        if (ch < '0' || ch > '9') throw ParseError(std::string("pgm: bad ") + what + " '" + tok + "'");
        value = value * 10 + (ch - '0');
        if (value > 1 << 24) throw ParseError(std::string("pgm: unreasonable ") + what);
    }
    return value;
}

}  // namespace

void save_raster(const Raster& img, const std::filesystem::path& path) {
    if (img.height <= 0 || img.width <= 0) throw ShapeError("save_raster: empty raster");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_raster: cannot open " + path.string());
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()),
              static_cast<std::streamsize>(img.px.size()));
    if (!out) throw IoError("save_raster: write failed for " + path.string());
}

Raster load_raster(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_raster: cannot open " + path.string());
    if (next_header_token(in) != "P5") throw ParseError("pgm: not a binary P5 file");
    const int width = parse_header_int(in, "width");
    const int height = parse_header_int(in, "height");
    const int maxval = parse_header_int(in, "maxval");
    if (width <= 0 || height <= 0) throw ParseError("pgm: non-positive dimensions");
    if (maxval != 255) throw ParseError("pgm: only maxval 255 supported");
    // Header ends with exactly one whitespace byte (already consumed by the
    // token reader); pixel payload follows.
    Raster img(height, width);
    in.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.px.size()))
        throw ParseError("pgm: truncated pixel data");
    return img;
}

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::ofstream& out, const char type[4], const std::vector<uint8_t>& data) {
    std::vector<uint8_t> buf;
    put_u32_be(buf, static_cast<uint32_t>(data.size()));
    buf.insert(buf.end(), type, type + 4);
    buf.insert(buf.end(), data.begin(), data.end());
    const uint32_t crc = static_cast<uint32_t>(
        crc32(crc32(0L, reinterpret_cast<const Bytef*>(type), 4),
              data.empty() ? nullptr : data.data(), static_cast<uInt>(data.size())));
    put_u32_be(buf, crc);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

}  // namespace

void save_png(const Raster& img, const std::filesystem::path& path) {
    if (img.height <= 0 || img.width <= 0) throw ShapeError("save_png: empty raster");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_png: cannot open " + path.string());

    static const std::array<uint8_t, 8> signature = {137, 80, 78, 71, 13, 10, 26, 10};
    out.write(reinterpret_cast<const char*>(signature.data()), signature.size());

    std::vector<uint8_t> ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(img.width));
    put_u32_be(ihdr, static_cast<uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // color type: grayscale
    ihdr.push_back(0);  // compression
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    put_chunk(out, "IHDR", ihdr);

    // Scanlines, each prefixed with filter byte 0 (no filtering).
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(img.height) * (img.width + 1));
    for (int r = 0; r < img.height; ++r) {
        raw.push_back(0);
        raw.insert(raw.end(), img.px.begin() + static_cast<std::ptrdiff_t>(r) * img.width,
                   img.px.begin() + static_cast<std::ptrdiff_t>(r + 1) * img.width);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
        throw IoError("save_png: zlib compression failed");
    idat.resize(bound);
    put_chunk(out, "IDAT", idat);
    put_chunk(out, "IEND", {});
    if (!out) throw IoError("save_png: write failed for " + path.string());
}

}  // namespace sketchgen
