#pragma once

/**
 * Structure-guided parallel decoding.
 *
 * Each iteration t (running T-1 down to 0) samples every masked position in
 * parallel from the class-conditional model, then re-masks a scheduled
 * fraction gamma(t) of the N tokens for refinement in the next iteration.
 * The budget is split between two Gumbel top-k masks joined by logical OR:
 *
 *   m_s  re-masks floor(lambda_s * gamma(t) * N) tokens with the highest
 *        attention-map structural distance to the guide;
 *   m_c  re-masks floor((1-lambda_s) * gamma(t) * N) tokens with the lowest
 *        guidance-calibrated model likelihood.
 *
 * After the t = 0 iteration the final mask rate is still positive, so any
 * remaining masked positions are completed with their argmax token in one
 * extra forward pass.
 *
 * All randomness flows from the run seed through fixed per-purpose streams
 * (token draws, structure mask, confidence mask, guidance class), so a run
 * is a pure function of (model, guide, class, config, seed), and disabling
 * one consumer never shifts the others.
 */

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "sketchgen/rng.hpp"
#include "sketchgen/structure.hpp"
#include "sketchgen/transformer.hpp"

namespace sketchgen {

struct SamplerConfig {
    int iterations = 64;              // T
    double lambda_s = 0.9;            // structure share of the mask budget
    double gamma_start = 0.95;        // gamma(T-1), the initial mask rate
    double gamma_end = 0.25;          // gamma(0), the stopping mask rate
    double guidance_scale = 0.0;      // beta
    double gumbel_temperature = 0.0;  // mask-sampling noise scale
    double sample_temperature = 1.0;  // token draw temperature
    std::vector<int> layers = {1, 2, 6, 7, 8};
    uint64_t seed = 0;

    void validate(const TransformerConfig& model_cfg) const;
};

// Linear mask-rate schedule: gamma(T-1) = gamma_start down to
// gamma(0) = gamma_end as the loop proceeds. For T == 1 the single
// iteration sits at the stopping endpoint gamma_end.
double mask_schedule(int t, int iterations, double gamma_start, double gamma_end);

// Gumbel top-k mask: adds i.i.d. Gumbel(0, temperature) noise to the scores
// and marks the k largest. Higher score means more likely masked; callers
// negate likelihood scores. temperature 0 is deterministic top-k with
// lowest-index tie-break. Returns exactly k marks.
std::vector<uint8_t> sample_mask(std::span<const double> scores, int k, double temperature,
                                 Rng& rng);

// Guidance-calibrated confidence scores, one per token:
//   s_c(i) = log p(y_i | cond) - beta * (log p(y_i | cond) - log p(y_i | rand))
// with log p read from the log-softmax rows at the sampled token index.
std::vector<double> cfg_scores(const Mat& logits_cond, const Mat& logits_rand,
                               const TokenGrid& sampled, double beta);

struct IterationTrace {
    int t = 0;
    double gamma = 0.0;
    int structure_masked = 0;
    int confidence_masked = 0;
    int total_masked = 0;
    double mean_structure_score = 0.0;
    double mean_confidence_score = 0.0;
};
using SampleTrace = std::vector<IterationTrace>;

void write_trace_jsonl(const SampleTrace& trace, const std::filesystem::path& path);

// Structure-guided sampling from a fully masked canvas. The sketch must be
// fully unmasked; its attention maps are computed once and cached for the
// whole run. With lambda_s = 0 the structure machinery is never touched and
// the run is bit-identical to baseline_sample with the same seed.
TokenGrid masksketch_sample(const TransformerModel& model, const TokenGrid& sketch,
                            int class_label, const SamplerConfig& config, uint64_t seed,
                            SampleTrace* trace = nullptr);

// Confidence-only parallel decoding (no guide). Requires lambda_s == 0.
TokenGrid baseline_sample(const TransformerModel& model, int class_label,
                          const SamplerConfig& config, uint64_t seed,
                          SampleTrace* trace = nullptr);

// Post-hoc refinement: n_steps extra iterations with lambda_s = 0, model
// likelihood as the critic score, and a cosine mask-ratio schedule peaking
// at ratio_peak. n_steps = 0 returns the input unchanged.
TokenGrid refine(const TransformerModel& model, const TokenGrid& tokens, int class_label,
                 double ratio_peak, int n_steps, const SamplerConfig& config, uint64_t seed);

// Mean negative log-likelihood of a fully unmasked grid under the model
// (one forward pass; used as the refinement quality measure).
double mean_token_nll(const TransformerModel& model, const TokenGrid& grid, int class_label);

}  // namespace sketchgen
