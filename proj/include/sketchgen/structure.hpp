#pragma once

/**
 * Attention-based structural distance between two token grids.
 *
 * Two grids are structurally close at token i when the i-th rows of their
 * self-attention maps are close as probability distributions. The per-token
 * distance sums, over a chosen layer set, the Jeffrey's divergence between
 * head-averaged attention rows of the two inputs; it is symmetric in the
 * two grids and grows monotonically with the layer set.
 */

#include <filesystem>
#include <span>
#include <vector>

#include "sketchgen/transformer.hpp"

namespace sketchgen {

struct StructureScores {
    std::vector<double> per_token;  // length N, all finite and >= 0
    std::vector<int> layers;        // 1-based layer ids used

    double mean() const;
};

inline constexpr double kDivergenceSmoothing = 1e-8;

// Symmetrized KL divergence (KL(u||v) + KL(v||u)) / 2. Inputs must be
// nonnegative and sum to 1 within 1e-4; they are renormalized exactly and
// smoothed additively with kDivergenceSmoothing before the logs, which keeps
// the value finite and term-wise nonnegative for saturated rows.
double jeffreys(std::span<const double> u, std::span<const double> v);

// Sum over the given maps of the Jeffrey's divergence between row i of each
// pair. guide_maps and candidate_maps must be parallel lists over the same
// layer set.
double token_structure_distance(const std::vector<Mat>& guide_maps,
                                const std::vector<Mat>& candidate_maps, int token_index);

// Per-token distances between a precomputed guide map list and a candidate
// grid (one forward pass for the candidate). The candidate must be fully
// unmasked.
StructureScores structure_scores(const TransformerModel& model, const std::vector<Mat>& guide_maps,
                                 const TokenGrid& candidate, const std::vector<int>& layers,
                                 int class_label);

// Convenience overload computing the guide maps itself.
StructureScores structure_scores(const TransformerModel& model, const TokenGrid& guide,
                                 const TokenGrid& candidate, const std::vector<int>& layers);

// Debug exports: attention maps as PGM heatmaps (one file per layer), and a
// PCA projection of the rows (top 3 components, one heatmap per component,
// reshaped to the token grid) for layout visualization.
void export_attention_heatmaps(const std::vector<Mat>& maps, const std::vector<int>& layers,
                               const std::filesystem::path& dir, const std::string& prefix);
void export_attention_pca(const Mat& map, int grid_height, int grid_width,
                          const std::filesystem::path& dir, const std::string& prefix);

}  // namespace sketchgen
