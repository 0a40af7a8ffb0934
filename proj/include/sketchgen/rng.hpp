#pragma once

/**
 * Seeded random number generation with documented stream derivation.
 *
 * All randomness in the project flows from one root seed. Independent
 * streams (per trial, per purpose inside a sampling run, per batch item)
 * are derived with derive_seed(root, tags...), a splitmix64 chain over the
 * tag path. Two streams with different tag paths are statistically
 * independent and, crucially, consuming one never shifts the other.
 *
 * Distributions are hand-rolled on top of std::mt19937_64 raw output so
 * results are identical across standard library implementations
 * (std::uniform_real_distribution et al. are implementation-defined).
 */

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "sketchgen/errors.hpp"

namespace sketchgen {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stream tags used across the project. Listed here so the derivation rule
// is auditable in one place.
enum class Stream : uint64_t {
    kDataset = 1,
    kModelInit = 2,
    kTraining = 3,
    kTokenDraw = 4,       // categorical draws at masked positions
    kStructureMask = 5,   // Gumbel noise for the structure mask
    kConfidenceMask = 6,  // Gumbel noise for the confidence mask
    kGuidanceClass = 7,   // the per-run random class r
    kTrial = 8,           // per-trial sub-seeds in run_trials
    kRefine = 9,
    kEmbedderInit = 10,
    kEmbedderTrain = 11,
    kEval = 12,
};

inline uint64_t derive_seed(uint64_t root, uint64_t tag) {
    return splitmix64(root ^ splitmix64(tag));
}

inline uint64_t derive_seed(uint64_t root, uint64_t tag, uint64_t index) {
    return derive_seed(derive_seed(root, tag), index);
}

inline uint64_t derive_seed(uint64_t root, Stream s) {
    return derive_seed(root, static_cast<uint64_t>(s));
}

inline uint64_t derive_seed(uint64_t root, Stream s, uint64_t index) {
    return derive_seed(root, static_cast<uint64_t>(s), index);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection sampling, no modulo bias.
    int uniform_int(int n) {
        if (n <= 0) throw InputError("uniform_int: n must be positive");
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    // Standard normal via Box-Muller; the spare value is cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Standard Gumbel(0, 1).
    double gumbel() {
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return -std::log(-std::log(u));
    }

    // Draws an index from softmax(logits / temperature). temperature == 0
    // degenerates to argmax with lowest-index tie-break and consumes no
    // randomness.
    int categorical_logits(std::span<const double> logits, double temperature);

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline int Rng::categorical_logits(std::span<const double> logits, double temperature) {
    if (logits.empty()) throw InputError("categorical_logits: empty logits");
    if (temperature < 0.0) throw ConfigError("categorical_logits: negative temperature");
    std::size_t best = 0;
    double max_logit = logits[0];
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > max_logit) {
            max_logit = logits[i];
            best = i;
        }
    }
    if (temperature == 0.0) return static_cast<int>(best);

    double total = 0.0;
    std::vector<double> weights(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        weights[i] = std::exp((logits[i] - max_logit) / temperature);
        total += weights[i];
    }
    const double u = uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        acc += weights[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(logits.size() - 1);
}

}  // namespace sketchgen
