#include "sketchgen/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>

#include <nlohmann/json.hpp>

#include "sketchgen/errors.hpp"

namespace sketchgen {

void SamplerConfig::validate(const TransformerConfig& model_cfg) const {
    if (iterations < 1) throw ConfigError("sampler: iterations must be >= 1");
    if (!(lambda_s >= 0.0 && lambda_s <= 1.0)) throw ConfigError("sampler: lambda_s must be in [0,1]");
    if (!(gamma_start > 0.0 && gamma_start <= 1.0 && gamma_end > 0.0 && gamma_end <= 1.0))
        throw ConfigError("sampler: schedule endpoints must be in (0,1]");
    if (!(gamma_start > gamma_end)) throw ConfigError("sampler: gamma_start must exceed gamma_end");
    if (gumbel_temperature < 0.0) throw ConfigError("sampler: gumbel temperature must be >= 0");
    if (sample_temperature < 0.0) throw ConfigError("sampler: sample temperature must be >= 0");
    if (lambda_s > 0.0) {
        if (layers.empty()) throw ConfigError("sampler: empty layer set");
        for (int l : layers)
            if (l < 1 || l > model_cfg.num_layers)
                throw ConfigError("sampler: layer id out of range");
    }
    if (guidance_scale != 0.0 && model_cfg.num_classes < 2)
        throw ConfigError("sampler: guidance needs at least two classes");
}

double mask_schedule(int t, int iterations, double gamma_start, double gamma_end) {
    if (iterations < 1) throw ConfigError("mask_schedule: iterations must be >= 1");
    if (!(gamma_start > gamma_end) || !(gamma_start <= 1.0) || !(gamma_end > 0.0))
        throw ConfigError("mask_schedule: endpoints must satisfy 0 < gamma_end < gamma_start <= 1");
    if (t < 0 || t >= iterations) throw InputError("mask_schedule: t out of range");
    if (iterations == 1) return gamma_end;  // the single iteration is the stopping endpoint
    return gamma_end + (gamma_start - gamma_end) * static_cast<double>(t) /
                           static_cast<double>(iterations - 1);
}

std::vector<uint8_t> sample_mask(std::span<const double> scores, int k, double temperature,
                                 Rng& rng) {
    const int n = static_cast<int>(scores.size());
    if (k < 0 || k > n) throw ConfigError("sample_mask: k out of range");
    if (temperature < 0.0) throw ConfigError("sample_mask: negative temperature");
    for (double s : scores)
        if (!std::isfinite(s)) throw InputError("sample_mask: non-finite score");
    std::vector<uint8_t> mask(static_cast<std::size_t>(n), 0);
    if (k == 0) return mask;

    std::vector<double> perturbed(scores.begin(), scores.end());
    if (temperature > 0.0)
        for (double& s : perturbed) s += temperature * rng.gumbel();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        if (perturbed[static_cast<std::size_t>(a)] != perturbed[static_cast<std::size_t>(b)])
            return perturbed[static_cast<std::size_t>(a)] > perturbed[static_cast<std::size_t>(b)];
        return a < b;
    });
    for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
    return mask;
}

namespace {

// Log-softmax of one logits row evaluated at a single index.
double log_prob_at(const Mat& logits, int row, int index) {
    const auto r = logits.row(row);
    const double mx = r.maxCoeff();
    const double lse = mx + std::log((r.array() - mx).exp().sum());
    return r(index) - lse;
}

}  // namespace

std::vector<double> cfg_scores(const Mat& logits_cond, const Mat& logits_rand,
                               const TokenGrid& sampled, double beta) {
    if (logits_cond.rows() != logits_rand.rows() || logits_cond.cols() != logits_rand.cols())
        throw ShapeError("cfg_scores: logits shape mismatch");
    if (static_cast<int>(sampled.tokens.size()) != logits_cond.rows())
        throw ShapeError("cfg_scores: sampled grid does not match logits rows");
    std::vector<double> scores(sampled.tokens.size());
    for (std::size_t i = 0; i < sampled.tokens.size(); ++i) {
        const int tok = sampled.tokens[i];
        if (tok < 0 || tok >= logits_cond.cols())
            throw InputError("cfg_scores: sampled token outside logit range");
        const double lc = log_prob_at(logits_cond, static_cast<int>(i), tok);
        if (beta == 0.0) {
            scores[i] = lc;
        } else {
            const double lr = log_prob_at(logits_rand, static_cast<int>(i), tok);
            scores[i] = lc - beta * (lc - lr);
        }
    }
    return scores;
}

namespace {

struct RunStreams {
    Rng token_draw;
    Rng structure_mask;
    Rng confidence_mask;
    Rng guidance_class;
};

RunStreams make_streams(uint64_t seed) {
    return RunStreams{Rng(derive_seed(seed, Stream::kTokenDraw)),
                      Rng(derive_seed(seed, Stream::kStructureMask)),
                      Rng(derive_seed(seed, Stream::kConfidenceMask)),
                      Rng(derive_seed(seed, Stream::kGuidanceClass))};
}

double mean_of(std::span<const double> v) {
    if (v.empty()) return 0.0;
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

// Shared decoding loop for guided sampling, baseline sampling and
// refinement. guide_maps == nullptr disables the structure mask entirely
// (requires lambda_s == 0). The schedule is an arbitrary gamma(t) so the
// refinement pass can reuse the loop with its cosine ramp.
TokenGrid parallel_decode(const TransformerModel& model, const std::vector<Mat>* guide_maps,
                          TokenGrid state, int class_label, int iterations,
                          const std::function<double(int)>& gamma_at, const SamplerConfig& cfg,
                          RunStreams& streams, SampleTrace* trace) {
    const auto& mcfg = model.cfg;
    const int n = mcfg.seq_len;
    const int mask_token = mcfg.vocab_size;
    const bool use_structure = cfg.lambda_s > 0.0;
    if (use_structure && guide_maps == nullptr)
        throw ConfigError("parallel_decode: structure budget requires a guide");

    // Random class for guidance, drawn once per run.
    int rand_class = class_label;
    if (cfg.guidance_scale != 0.0) {
        const int offset = streams.guidance_class.uniform_int(mcfg.num_classes - 1);
        rand_class = (class_label + 1 + offset) % mcfg.num_classes;
    }

    std::vector<double> row_logits(static_cast<std::size_t>(mcfg.vocab_size));
    for (int t = iterations - 1; t >= 0; --t) {
        const double gamma = gamma_at(t);
        const int k_struct = static_cast<int>(std::floor(cfg.lambda_s * gamma * n));
        const int k_conf = static_cast<int>(std::floor((1.0 - cfg.lambda_s) * gamma * n));

        const ForwardResult cond = forward(model, state, class_label, false);

        // Sample every masked position in parallel; committed tokens stay.
        TokenGrid sampled = state;
        for (int i = 0; i < n; ++i) {
            if (state.tokens[static_cast<std::size_t>(i)] != mask_token) continue;
            for (int v = 0; v < mcfg.vocab_size; ++v)
                row_logits[static_cast<std::size_t>(v)] = cond.logits(i, v);
            sampled.tokens[static_cast<std::size_t>(i)] =
                streams.token_draw.categorical_logits(row_logits, cfg.sample_temperature);
        }

        std::vector<double> conf;
        if (cfg.guidance_scale != 0.0) {
            const ForwardResult rand_fwd = forward(model, state, rand_class, false);
            conf = cfg_scores(cond.logits, rand_fwd.logits, sampled, cfg.guidance_scale);
        } else {
            conf = cfg_scores(cond.logits, cond.logits, sampled, 0.0);
        }

        std::vector<double> struct_scores;
        std::vector<uint8_t> m_struct(static_cast<std::size_t>(n), 0);
        if (k_struct > 0) {
            const StructureScores ss =
                structure_scores(model, *guide_maps, sampled, cfg.layers, class_label);
            struct_scores = ss.per_token;
            m_struct = sample_mask(struct_scores, k_struct, cfg.gumbel_temperature,
                                   streams.structure_mask);
        }
        std::vector<uint8_t> m_conf(static_cast<std::size_t>(n), 0);
        if (k_conf > 0) {
            std::vector<double> negated(conf.size());
            for (std::size_t i = 0; i < conf.size(); ++i) negated[i] = -conf[i];
            m_conf = sample_mask(negated, k_conf, cfg.gumbel_temperature, streams.confidence_mask);
        }

        int total_masked = 0;
        state = sampled;
        for (int i = 0; i < n; ++i) {
            if (m_struct[static_cast<std::size_t>(i)] || m_conf[static_cast<std::size_t>(i)]) {
                state.tokens[static_cast<std::size_t>(i)] = mask_token;
                ++total_masked;
            }
        }
        if (trace)
            trace->push_back({t, gamma, k_struct, k_conf, total_masked, mean_of(struct_scores),
                              mean_of(conf)});
    }

    // Completion: fill whatever the stopping mask rate left open with the
    // class-conditional argmax.
    bool any_masked = false;
    for (int tok : state.tokens) any_masked |= (tok == mask_token);
    if (any_masked) {
        const ForwardResult final_fwd = forward(model, state, class_label, false);
        for (int i = 0; i < n; ++i) {
            if (state.tokens[static_cast<std::size_t>(i)] != mask_token) continue;
            Eigen::Index argmax;
            final_fwd.logits.row(i).maxCoeff(&argmax);
            state.tokens[static_cast<std::size_t>(i)] = static_cast<int>(argmax);
        }
    }
    return state;
}

}  // namespace

TokenGrid masksketch_sample(const TransformerModel& model, const TokenGrid& sketch,
                            int class_label, const SamplerConfig& config, uint64_t seed,
                            SampleTrace* trace) {
    config.validate(model.cfg);
    if (sketch.count() != model.cfg.seq_len)
        throw ShapeError("masksketch_sample: sketch size does not match model");
    for (int tok : sketch.tokens)
        if (tok == model.cfg.vocab_size)
            throw InputError("masksketch_sample: sketch must be fully unmasked");

    RunStreams streams = make_streams(seed);
    std::vector<Mat> guide_maps;
    const std::vector<Mat>* guide_ptr = nullptr;
    if (config.lambda_s > 0.0) {
        guide_maps = attn_map(model, sketch, config.layers, class_label);
        guide_ptr = &guide_maps;
    }
    TokenGrid canvas(sketch.height, sketch.width, model.cfg.vocab_size, class_label);
    auto gamma_at = [&](int t) {
        return mask_schedule(t, config.iterations, config.gamma_start, config.gamma_end);
    };
    return parallel_decode(model, guide_ptr, std::move(canvas), class_label, config.iterations,
                           gamma_at, config, streams, trace);
}

TokenGrid baseline_sample(const TransformerModel& model, int class_label,
                          const SamplerConfig& config, uint64_t seed, SampleTrace* trace) {
    if (config.lambda_s != 0.0)
        throw ConfigError("baseline_sample: lambda_s must be 0 without a guide");
    config.validate(model.cfg);
    RunStreams streams = make_streams(seed);
    const int side = static_cast<int>(std::lround(std::sqrt(model.cfg.seq_len)));
    const int height = side * side == model.cfg.seq_len ? side : 1;
    const int width = model.cfg.seq_len / height;
    TokenGrid canvas(height, width, model.cfg.vocab_size, class_label);
    auto gamma_at = [&](int t) {
        return mask_schedule(t, config.iterations, config.gamma_start, config.gamma_end);
    };
    return parallel_decode(model, nullptr, std::move(canvas), class_label, config.iterations,
                           gamma_at, config, streams, trace);
}

TokenGrid refine(const TransformerModel& model, const TokenGrid& tokens, int class_label,
                 double ratio_peak, int n_steps, const SamplerConfig& config, uint64_t seed) {
    if (!(ratio_peak > 0.0 && ratio_peak < 1.0))
        throw ConfigError("refine: ratio_peak must be in (0,1)");
    if (n_steps < 0) throw ConfigError("refine: n_steps must be >= 0");
    for (int tok : tokens.tokens)
        if (tok == model.cfg.vocab_size) throw InputError("refine: tokens must be fully unmasked");
    if (n_steps == 0) return tokens;

    SamplerConfig cfg = config;
    cfg.lambda_s = 0.0;  // no structure guidance in the refinement pass
    RunStreams streams = make_streams(derive_seed(seed, Stream::kRefine));
    // Cosine ramp over the refinement pass: the loop runs t = n_steps-1 .. 0,
    // so the first iteration carries the peak ratio.
    auto gamma_at = [&](int t) {
        const int step = n_steps - 1 - t;
        return std::max(1e-9, ratio_peak * std::cos(M_PI_2 * static_cast<double>(step) /
                                                    static_cast<double>(n_steps)));
    };
    return parallel_decode(model, nullptr, tokens, class_label, n_steps, gamma_at, cfg, streams,
                           nullptr);
}

double mean_token_nll(const TransformerModel& model, const TokenGrid& grid, int class_label) {
    for (int tok : grid.tokens)
        if (tok == model.cfg.vocab_size)
            throw InputError("mean_token_nll: grid must be fully unmasked");
    const ForwardResult fwd = forward(model, grid, class_label, false);
    double acc = 0.0;
    for (int i = 0; i < model.cfg.seq_len; ++i)
        acc -= log_prob_at(fwd.logits, i, grid.tokens[static_cast<std::size_t>(i)]);
    return acc / static_cast<double>(model.cfg.seq_len);
}

void write_trace_jsonl(const SampleTrace& trace, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_trace_jsonl: cannot open " + path.string());
    for (const auto& row : trace) {
        nlohmann::json j{{"t", row.t},
                         {"gamma", row.gamma},
                         {"structure_masked", row.structure_masked},
                         {"confidence_masked", row.confidence_masked},
                         {"total_masked", row.total_masked},
                         {"mean_structure_score", row.mean_structure_score},
                         {"mean_confidence_score", row.mean_confidence_score}};
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("write_trace_jsonl: write failed");
}

}  // namespace sketchgen
