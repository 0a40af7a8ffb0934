#include "sketchgen/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "sketchgen/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace sketchgen {
namespace ckpt {

namespace {
constexpr char kMagic[8] = {'S', 'G', 'M', 'O', 'D', 'E', 'L', '1'};

void write_u32(std::ofstream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::ifstream& in) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw ParseError("checkpoint: truncated header");
    return v;
}
}  // namespace

uint32_t f32_bits(double value) {
    const float f = static_cast<float>(value);
    uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    return bits;
}

double f32_from_bits(uint32_t bits) {
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return static_cast<double>(f);
}

void write_header(std::ofstream& out, uint32_t model_type, const std::vector<uint32_t>& words) {
    out.write(kMagic, sizeof(kMagic));
    write_u32(out, model_type);
    write_u32(out, static_cast<uint32_t>(words.size()));
    for (uint32_t w : words) write_u32(out, w);
}

std::vector<uint32_t> read_header(std::ifstream& in, uint32_t expected_type,
                                  const std::filesystem::path& path) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw ParseError("checkpoint: bad magic in " + path.string());
    const uint32_t type = read_u32(in);
    if (type != expected_type)
        throw ParseError("checkpoint: wrong model type in " + path.string());
    const uint32_t count = read_u32(in);
    if (count > 64) throw ParseError("checkpoint: unreasonable header size");
    std::vector<uint32_t> words(count);
    for (auto& w : words) w = read_u32(in);
    return words;
}

void write_tensor_f32(std::ofstream& out, const double* data, std::size_t count) {
    std::vector<float> buf(count);
    for (std::size_t i = 0; i < count; ++i) buf[i] = static_cast<float>(data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(count * sizeof(float)));
}

void read_tensor_f32(std::ifstream& in, double* data, std::size_t count) {
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(float)))
        throw ParseError("checkpoint: truncated tensor payload");
    for (std::size_t i = 0; i < count; ++i) data[i] = static_cast<double>(buf[i]);
}

}  // namespace ckpt

void save_model(const TransformerModel& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_model: cannot open " + path.string());
    const auto& c = model.cfg;
    ckpt::write_header(out, kCheckpointTransformer,
                       {static_cast<uint32_t>(c.num_layers), static_cast<uint32_t>(c.num_heads),
                        static_cast<uint32_t>(c.width), static_cast<uint32_t>(c.ffn_hidden),
                        static_cast<uint32_t>(c.vocab_size), static_cast<uint32_t>(c.num_classes),
                        static_cast<uint32_t>(c.seq_len), ckpt::f32_bits(c.init_std)});
    auto views = tensor_views(const_cast<TransformerParams&>(model.params));
    for (const auto& v : views)
        ckpt::write_tensor_f32(out, v.data, static_cast<std::size_t>(v.size()));
    if (!out) throw IoError("save_model: write failed for " + path.string());
}

TransformerModel load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_model: cannot open " + path.string());
    const auto words = ckpt::read_header(in, kCheckpointTransformer, path);
    if (words.size() != 8) throw ParseError("checkpoint: transformer header must have 8 words");
    TransformerConfig cfg;
    cfg.num_layers = static_cast<int>(words[0]);
    cfg.num_heads = static_cast<int>(words[1]);
    cfg.width = static_cast<int>(words[2]);
    cfg.ffn_hidden = static_cast<int>(words[3]);
    cfg.vocab_size = static_cast<int>(words[4]);
    cfg.num_classes = static_cast<int>(words[5]);
    cfg.seq_len = static_cast<int>(words[6]);
    cfg.init_std = ckpt::f32_from_bits(words[7]);
    cfg.validate();
    TransformerModel model = init_model(cfg, 0);
    for (auto& v : tensor_views(model.params))
        ckpt::read_tensor_f32(in, v.data, static_cast<std::size_t>(v.size()));
    char extra;
    if (in.read(&extra, 1)) throw ParseError("checkpoint: trailing bytes in " + path.string());
    return model;
}

}  // namespace sketchgen
