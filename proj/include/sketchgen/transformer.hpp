#pragma once

/**
 * Class-conditional bidirectional transformer over token sequences, with
 * full per-layer per-head attention capture and a hand-written backward
 * pass (no autograd).
 *
 * Layout conventions:
 *  - activations are N x width matrices, one row per token position;
 *  - linear layers store W as (out x in) and compute y = x * W^T + b;
 *  - pre-LayerNorm residual blocks, exact-erf GELU, softmax with
 *    max-subtraction;
 *  - class conditioning is an additive class embedding broadcast to every
 *    position, so the sequence stays exactly N long and attention maps are
 *    N x N.
 *
 * Public layer ids are 1-based (1 .. num_layers), matching the layer-set
 * notation used by the structure distance and the CLI.
 */

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "sketchgen/tokens.hpp"

namespace sketchgen {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

inline constexpr double kLayerNormEps = 1e-5;

struct TransformerConfig {
    int num_layers = 8;
    int num_heads = 4;
    int width = 128;
    int ffn_hidden = 0;  // 0 means 4 * width
    int vocab_size = 16;  // K; the MASK token (index K) has an embedding row but no logit
    int num_classes = 5;
    int seq_len = 256;  // N
    double init_std = 0.02;

    int ffn_dim() const { return ffn_hidden > 0 ? ffn_hidden : 4 * width; }
    int head_dim() const { return width / num_heads; }
    void validate() const;  // throws ConfigError
    bool operator==(const TransformerConfig&) const = default;
};

struct LayerParams {
    Vec ln1_gain, ln1_bias;
    Mat w_q, w_k, w_v, w_o;
    Vec b_q, b_k, b_v, b_o;
    Vec ln2_gain, ln2_bias;
    Mat w_ff1;
    Vec b_ff1;
    Mat w_ff2;
    Vec b_ff2;
};

struct TransformerParams {
    Mat token_embed;  // (K+1) x width
    Mat pos_embed;    // N x width
    Mat class_embed;  // num_classes x width
    std::vector<LayerParams> layers;
    Vec lnf_gain, lnf_bias;
    Mat w_out;  // K x width
    Vec b_out;  // K
};

struct TransformerModel {
    TransformerConfig cfg;
    TransformerParams params;
};

// Flat view over every parameter tensor, in the canonical checkpoint order.
struct TensorView {
    std::string name;
    double* data;
    Eigen::Index rows;
    Eigen::Index cols;  // 1 for vectors
    Eigen::Index size() const { return rows * cols; }
};
std::vector<TensorView> tensor_views(TransformerParams& params);

// Allocates zero gradients / moments shaped like the model.
TransformerParams zeros_like(const TransformerModel& model);

// Deterministic scaled random initialization: every weight matrix and
// embedding ~ N(0, init_std^2), biases zero, LayerNorm gains one.
TransformerModel init_model(const TransformerConfig& cfg, uint64_t seed);

// Per-layer, per-head row-stochastic attention matrices for one input.
struct AttentionStack {
    // heads[layer][head] is N x N; layer index 0-based internally.
    std::vector<std::vector<Mat>> heads;

    int num_layers() const { return static_cast<int>(heads.size()); }
    // Arithmetic mean over heads for 1-based layer id; preserves
    // row-stochasticity (convex combination of stochastic rows).
    Mat layer_average(int layer_id) const;
};

struct ForwardResult {
    Mat logits;  // N x K
    AttentionStack attn;
};

// Full forward pass. Throws InputError on out-of-range tokens or class.
// When capture_attention is false the result's stack is left empty (cheaper;
// used by the inner sampling loop when maps are not needed).
ForwardResult forward(const TransformerModel& model, const TokenGrid& grid, int class_label,
                      bool capture_attention = true);

// Head-averaged attention maps for the requested 1-based layer ids.
// Throws ConfigError on an empty set or out-of-range layer.
std::vector<Mat> attn_map(const TransformerModel& model, const TokenGrid& grid,
                          const std::vector<int>& layers, int class_label = 0);

// ---------------------------------------------------------------------------
// Training-facing internals: forward with caches and the hand-written
// backward pass. The cache stores exactly what the backward pass consumes.
// ---------------------------------------------------------------------------

struct LayerCache {
    Mat input;                 // h entering the block
    Mat ln1_xhat;
    Vec ln1_inv_std;
    Mat q, k, v;               // N x width
    std::vector<Mat> probs;    // per head, N x N
    Mat attn_concat;           // N x width, heads concatenated
    Mat mid;                   // after attention residual
    Mat ln2_xhat;
    Vec ln2_inv_std;
    Mat ffn_pre;               // F1 before GELU
    Mat ffn_act;               // GELU(F1)
};

struct ForwardCache {
    std::vector<int> tokens;
    int class_label = 0;
    Mat embedded;
    std::vector<LayerCache> layers;
    Mat final_input;
    Mat lnf_xhat;
    Vec lnf_inv_std;
    Mat final_norm;
    Mat logits;
};

void forward_cached(const TransformerModel& model, const TokenGrid& grid, int class_label,
                    ForwardCache& cache);

// Accumulates parameter gradients for d(loss)/d(logits) into grads
// (which must be zeros_like-shaped or hold prior accumulations).
void backward(const TransformerModel& model, const ForwardCache& cache, const Mat& dlogits,
              TransformerParams& grads);

}  // namespace sketchgen
