#pragma once

/**
 * Versioned binary model container, shared by the transformer and the proxy
 * embedder.
 *
 * Layout (all integers little-endian):
 *   bytes 0..7   magic "SGMODEL1"
 *   bytes 8..11  u32 model type (1 = transformer, 2 = embedder)
 *   bytes 12..15 u32 header word count H
 *   H * 4 bytes  header words (type-specific, see below)
 *   payload      parameter tensors as raw little-endian IEEE-754 float32,
 *                concatenated in the canonical tensor order
 *                (tensor_views order for the transformer; W1, b1, W2, b2 for
 *                the embedder), each tensor in Eigen's column-major element
 *                order. Tensor shapes are implied by the header.
 *
 * Transformer header words: num_layers, num_heads, width, ffn_hidden,
 * vocab_size, num_classes, seq_len, float32 bits of init_std.
 * Embedder header words: input_side, pool_side, hidden_dim, num_classes,
 * float32 bits of init_std.
 *
 * Parameters are float64 in memory; saving rounds them to float32.
 */

#include <filesystem>

#include "sketchgen/transformer.hpp"

namespace sketchgen {

inline constexpr uint32_t kCheckpointTransformer = 1;
inline constexpr uint32_t kCheckpointEmbedder = 2;

void save_model(const TransformerModel& model, const std::filesystem::path& path);
TransformerModel load_model(const std::filesystem::path& path);

// Low-level helpers shared with the embedder container.
namespace ckpt {
void write_header(std::ofstream& out, uint32_t model_type, const std::vector<uint32_t>& words);
std::vector<uint32_t> read_header(std::ifstream& in, uint32_t expected_type,
                                  const std::filesystem::path& path);
void write_tensor_f32(std::ofstream& out, const double* data, std::size_t count);
void read_tensor_f32(std::ifstream& in, double* data, std::size_t count);
uint32_t f32_bits(double value);
double f32_from_bits(uint32_t bits);
}  // namespace ckpt

}  // namespace sketchgen
