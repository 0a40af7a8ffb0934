#pragma once

/**
 * Declarative run configuration.
 *
 * One INI-style file drives every subcommand:
 *
 *   # comment
 *   [sampler]
 *   lambda_s = 0.9
 *   layers = 1,2,6,7,8
 *
 * CLI flags mirror the keys as --section.key=value (dashes and underscores
 * are interchangeable in key names). Every field has a documented default;
 * unknown sections or keys are rejected. The resolved configuration can be
 * echoed back out in a form that re-parses to the identical config, which
 * is what run directories store for reproducibility.
 *
 * All sub-module seeds are derived from the single [run] seed.
 */

#include <filesystem>
#include <string>
#include <vector>

#include "sketchgen/rejection.hpp"
#include "sketchgen/sampler.hpp"
#include "sketchgen/training.hpp"
#include "sketchgen/transformer.hpp"

namespace sketchgen {

struct RunConfig {
    // [dataset]
    int dataset_num_samples = 200;
    int dataset_num_classes = 5;
    int dataset_image_side = 64;
    int dataset_patch_side = 4;
    double dataset_holdout_fraction = 0.2;

    // [model] (vocab size, class count and sequence length are derived from
    // the dataset geometry and codebook)
    int model_num_layers = 8;
    int model_num_heads = 4;
    int model_width = 128;
    int model_ffn_hidden = 0;
    double model_init_std = 0.02;

    // [train]
    TrainConfig train;

    // [sampler]
    SamplerConfig sampler;

    // [refine]
    bool refine_enabled = false;
    double refine_ratio_peak = 0.5;
    int refine_steps = 32;

    // [rejection]
    std::vector<double> rejection_guidance_scales = kDefaultGuidanceScales;
    double rejection_exponent = 2.0;

    // [embedder]
    int embedder_pool_side = 4;
    int embedder_hidden_dim = 64;
    double embedder_init_std = 0.05;
    int embedder_steps = 400;
    int embedder_batch_size = 32;
    double embedder_learning_rate = 1e-3;

    // [run]
    uint64_t seed = 1;
    int threads = 2;

    // Derived views.
    int grid_side() const { return dataset_image_side / dataset_patch_side; }
    TransformerConfig model_config(int vocab_size) const;
    EmbedderConfig embedder_config() const;
    TrainConfig train_config() const;      // with the derived seed/threads
    SamplerConfig sampler_config() const;  // with the derived seed
    EmbedderTrainConfig embedder_train_config() const;
};

// Defaults, then the file's assignments. Throws IoError / ParseError /
// ConfigError.
RunConfig load_run_config(const std::filesystem::path& path);

// Apply --section.key=value overrides; returns arguments that are not
// config overrides untouched (there are none today: anything starting with
// "--" must match the schema or an explicit caller flag list).
void apply_override(RunConfig& config, const std::string& key, const std::string& value);

// Parses "--section.key=value"; returns false if the argument is not in
// that shape.
bool try_apply_flag(RunConfig& config, const std::string& arg);

// Serializes every field in schema order; re-parsing yields the same config.
void write_run_config(const RunConfig& config, const std::filesystem::path& path);
std::string config_to_string(const RunConfig& config);

// One line per key: "section.key = default  # (type)" for --help output.
std::string config_schema_help();

}  // namespace sketchgen
