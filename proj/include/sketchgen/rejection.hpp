#pragma once

/**
 * Multi-trial generation with proxy-embedder scoring.
 *
 * Each sketch is sampled R times with different guidance scales and derived
 * seeds; a small locally trained classifier stands in for the external
 * scoring model. Structure fidelity is the mean absolute difference of its
 * last feature block between guide and candidate rasters; realism is its
 * softmax probability of the target class. Both scores are min-max
 * normalized across the R trials and combined as
 * (1 - S_hat)^exponent * R_hat; the argmax candidate wins, ties to the
 * lowest trial index.
 */

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sketchgen/raster.hpp"
#include "sketchgen/sampler.hpp"
#include "sketchgen/tokens.hpp"

namespace sketchgen {

struct EmbedderConfig {
    int input_side = 64;
    int pool_side = 4;  // average-pooling factor before the MLP
    int hidden_dim = 64;
    int num_classes = 5;
    double init_std = 0.05;

    int feature_count() const {
        const int g = input_side / pool_side;
        return g * g;
    }
    void validate() const;
};

struct ProxyEmbedder {
    EmbedderConfig cfg;
    Mat w1;  // hidden x pooled-input
    Vec b1;
    Mat w2;  // classes x hidden
    Vec b2;
};

ProxyEmbedder init_embedder(const EmbedderConfig& cfg, uint64_t seed);

// Last-feature-block activations: GELU(W1 * pooled(x) + b1).
Vec embedder_features(const ProxyEmbedder& embedder, const Raster& image);

// Softmax class probabilities (sum to 1).
Vec embedder_class_probs(const ProxyEmbedder& embedder, const Raster& image);

struct EmbedderTrainConfig {
    int steps = 400;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    uint64_t seed = 1;
    void validate() const;
};

// Cross-entropy training on filled rasters only. Deterministic given seed.
// Returns the final batch loss.
double train_embedder(ProxyEmbedder& embedder, std::span<const ShapeSample> samples,
                      const EmbedderTrainConfig& config);

void save_embedder(const ProxyEmbedder& embedder, const std::filesystem::path& path);
ProxyEmbedder load_embedder(const std::filesystem::path& path);

// Mean absolute difference of last-feature-block activations; zero for
// identical rasters, symmetric in its arguments.
double proxy_struct_distance(const Raster& guide, const Raster& candidate,
                             const ProxyEmbedder& embedder);

// Softmax probability of class_label for the candidate raster.
double proxy_class_score(int class_label, const Raster& candidate, const ProxyEmbedder& embedder);

struct TrialResult {
    TokenGrid tokens;
    Raster raster;
    double guidance_scale = 0.0;
    uint64_t seed = 0;
    double struct_distance = 0.0;  // raw proxy feature distance to the guide
    double class_score = 0.0;      // raw proxy class probability
    double norm_struct = 0.0;      // min-max normalized across the trial set
    double norm_class = 0.0;
    double quality = 0.0;          // (1 - norm_struct)^exponent * norm_class
};

struct TrialSet {
    std::vector<TrialResult> trials;
    int selected = -1;
};

// Default guidance-scale grid for the trial sweep.
inline const std::vector<double> kDefaultGuidanceScales = {0.0, 0.05, 0.1, 0.25};

// One guided sampling run per guidance scale, each with a seed derived from
// (seed, trial index). Trials run on up to num_threads threads; results are
// identical regardless of thread count. Scores are filled in and the best
// candidate is selected before returning.
TrialSet run_trials(const TransformerModel& model, const Codebook& codebook,
                    const ProxyEmbedder& embedder, const Raster& sketch, int class_label,
                    const SamplerConfig& base_config, std::span<const double> guidance_scales,
                    uint64_t seed, int num_threads = 1, double exponent = 2.0);

// Normalization and argmax on raw score lists: min-max both to [0,1]
// (all-equal degenerates to 0.5), quality = (1 - S_hat)^exponent * R_hat,
// lowest index on ties. Exposed separately from select_best so the
// selection rule can be checked in isolation.
struct SelectionScores {
    std::vector<double> norm_struct;
    std::vector<double> norm_class;
    std::vector<double> quality;
    int best = 0;
};
SelectionScores select_index(std::span<const double> struct_raw, std::span<const double> class_raw,
                             double exponent = 2.0);

// Scores candidates, normalizes across the set, picks the argmax quality
// (lowest index on ties) and records it in trials.selected.
const TokenGrid& select_best(TrialSet& trials, const Raster& guide, int class_label,
                             const ProxyEmbedder& embedder, double exponent = 2.0);

void write_trial_csv(const TrialSet& trials, const std::filesystem::path& path);

}  // namespace sketchgen
