#pragma once

/**
 * Masked token modeling: variable-rate masking, cross-entropy over masked
 * positions only, Adam updates, and finite-difference gradient checking.
 */

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "sketchgen/rng.hpp"
#include "sketchgen/transformer.hpp"

namespace sketchgen {

struct TrainConfig {
    int batch_size = 8;
    int steps = 500;
    double learning_rate = 3e-4;
    double mask_rate_min = 0.1;   // per-batch mask rate ~ U[min, max]
    double mask_rate_max = 0.95;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double class_drop_prob = 0.0;  // reserved; guidance uses a random class, not a null class
    uint64_t seed = 1;
    int log_every = 25;
    int checkpoint_every = 0;  // 0 disables periodic checkpoints
    std::filesystem::path checkpoint_dir;
    int num_threads = 2;  // compute only; results are thread-count independent

    void validate() const;
};

// Loss, gradient and argmax accuracy for one masked grid against its
// original tokens. mask[i] != 0 marks positions that contribute to the
// loss; the grid is expected to carry the MASK token there. Gradients are
// accumulated into *grads when non-null, scaled by 1/denom (pass the total
// masked count of the enclosing batch to get a batch mean).
struct LossStats {
    double loss_sum = 0.0;  // summed over masked positions
    int masked = 0;
    int correct = 0;
};
LossStats masked_lm_loss_grad(const TransformerModel& model, const TokenGrid& masked_grid,
                              const std::vector<int>& targets, const std::vector<uint8_t>& mask,
                              double denom, TransformerParams* grads);

struct StepResult {
    double loss = 0.0;             // mean cross-entropy over masked positions
    double masked_accuracy = 0.0;  // argmax accuracy at masked positions
    int masked_positions = 0;
    TransformerParams grads;
};

// One training step's loss and gradients on a batch. Masks each position
// i.i.d. Bernoulli(mask_rate) per sample, resampling any sample that ends
// up with zero masked positions. Gradient accumulation is chunked in a
// fixed order, so results do not depend on num_threads.
StepResult masked_lm_step(const TransformerModel& model, std::span<const TokenGrid> batch,
                          double mask_rate, Rng& rng, int num_threads = 1);

struct TrainLogRow {
    int step = 0;
    double loss = 0.0;
    double masked_accuracy = 0.0;
};

struct TrainReport {
    std::vector<TrainLogRow> curve;
};

// Full training loop; mutates the model in place. Deterministic given
// (dataset, config, seed). Throws NumericError on NaN loss.
TrainReport train(TransformerModel& model, std::span<const TokenGrid> dataset,
                  const TrainConfig& config);

void write_loss_csv(const TrainReport& report, const std::filesystem::path& path);

// Held-out masked-token accuracy at a fixed mask rate, with the
// majority-token baseline measured on the same masked positions.
struct MaskedEval {
    double accuracy = 0.0;
    double majority_baseline = 0.0;
    int positions = 0;
};
MaskedEval eval_masked_accuracy(const TransformerModel& model, std::span<const TokenGrid> dataset,
                                double mask_rate, uint64_t seed);

// Central finite differences against an arbitrary scalar function, probing
// the given flat parameter positions. `loss` must be a pure function of the
// current parameter values.
double max_rel_grad_error(const std::function<double()>& loss, std::span<double*> probed_params,
                          std::span<const double> analytic, double epsilon);

// Finite-difference check of the analytic masked-LM gradient on one sample:
// masks half the positions (derived from seed), probes num_probes randomly
// chosen scalar parameters, and returns max |analytic - numeric| /
// (|numeric| + 1e-8). Throws InputError when epsilon <= 0.
double grad_check(TransformerModel& model, const TokenGrid& sample, double epsilon,
                  int num_probes = 50, uint64_t seed = 0);

}  // namespace sketchgen
