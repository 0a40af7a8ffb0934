#include "sketchgen/rejection.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "sketchgen/checkpoint.hpp"
#include "sketchgen/errors.hpp"

namespace sketchgen {

void EmbedderConfig::validate() const {
    if (input_side < 1 || pool_side < 1 || input_side % pool_side != 0)
        throw ConfigError("embedder: input_side must be a positive multiple of pool_side");
    if (hidden_dim < 1) throw ConfigError("embedder: hidden_dim must be >= 1");
    if (num_classes < 1) throw ConfigError("embedder: num_classes must be >= 1");
    if (!(init_std > 0.0)) throw ConfigError("embedder: init_std must be positive");
}

void EmbedderTrainConfig::validate() const {
    if (steps < 0) throw ConfigError("embedder train: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("embedder train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("embedder train: learning rate must be > 0");
}

ProxyEmbedder init_embedder(const EmbedderConfig& cfg, uint64_t seed) {
    cfg.validate();
    ProxyEmbedder e;
    e.cfg = cfg;
    Rng rng(derive_seed(seed, Stream::kEmbedderInit));
    e.w1 = Mat(cfg.hidden_dim, cfg.feature_count());
    e.w2 = Mat(cfg.num_classes, cfg.hidden_dim);
    for (Eigen::Index i = 0; i < e.w1.size(); ++i) e.w1.data()[i] = cfg.init_std * rng.gaussian();
    for (Eigen::Index i = 0; i < e.w2.size(); ++i) e.w2.data()[i] = cfg.init_std * rng.gaussian();
    e.b1 = Vec::Zero(cfg.hidden_dim);
    e.b2 = Vec::Zero(cfg.num_classes);
    return e;
}

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

Vec pooled_input(const EmbedderConfig& cfg, const Raster& image) {
    if (image.height != cfg.input_side || image.width != cfg.input_side)
        throw ShapeError("embedder: raster size does not match input_side");
    const int g = cfg.input_side / cfg.pool_side;
    Vec x = Vec::Zero(cfg.feature_count());
    const double norm = 1.0 / (255.0 * cfg.pool_side * cfg.pool_side);
    for (int by = 0; by < g; ++by)
        for (int bx = 0; bx < g; ++bx) {
            double acc = 0.0;
            for (int i = 0; i < cfg.pool_side; ++i)
                for (int j = 0; j < cfg.pool_side; ++j)
                    acc += image.at(by * cfg.pool_side + i, bx * cfg.pool_side + j);
            x(by * g + bx) = acc * norm;
        }
    return x;
}

Vec softmax_vec(const Vec& logits) {
    const double mx = logits.maxCoeff();
    Vec p = (logits.array() - mx).exp();
    return p / p.sum();
}

}  // namespace

Vec embedder_features(const ProxyEmbedder& e, const Raster& image) {
    const Vec x = pooled_input(e.cfg, image);
    Vec pre = e.w1 * x + e.b1;
    return pre.unaryExpr([](double v) { return gelu(v); });
}

Vec embedder_class_probs(const ProxyEmbedder& e, const Raster& image) {
    const Vec h = embedder_features(e, image);
    return softmax_vec(e.w2 * h + e.b2);
}

double train_embedder(ProxyEmbedder& e, std::span<const ShapeSample> samples,
                      const EmbedderTrainConfig& config) {
    config.validate();
    if (samples.empty()) throw ConfigError("train_embedder: empty dataset");
    for (const auto& s : samples)
        if (s.class_label < 0 || s.class_label >= e.cfg.num_classes)
            throw InputError("train_embedder: class label out of range");

    Rng rng(derive_seed(config.seed, Stream::kEmbedderTrain));
    Mat m_w1 = Mat::Zero(e.w1.rows(), e.w1.cols()), v_w1 = m_w1;
    Mat m_w2 = Mat::Zero(e.w2.rows(), e.w2.cols()), v_w2 = m_w2;
    Vec m_b1 = Vec::Zero(e.b1.size()), v_b1 = m_b1;
    Vec m_b2 = Vec::Zero(e.b2.size()), v_b2 = m_b2;

    double last_loss = 0.0;
    for (int step = 1; step <= config.steps; ++step) {
        Mat g_w1 = Mat::Zero(e.w1.rows(), e.w1.cols());
        Mat g_w2 = Mat::Zero(e.w2.rows(), e.w2.cols());
        Vec g_b1 = Vec::Zero(e.b1.size());
        Vec g_b2 = Vec::Zero(e.b2.size());
        double loss = 0.0;
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& sample = samples[static_cast<std::size_t>(
                rng.uniform_int(static_cast<int>(samples.size())))];
            const Vec x = pooled_input(e.cfg, sample.filled);
            const Vec pre = e.w1 * x + e.b1;
            const Vec h = pre.unaryExpr([](double v) { return gelu(v); });
            const Vec probs = softmax_vec(e.w2 * h + e.b2);
            loss -= std::log(std::max(probs(sample.class_label), 1e-300));

            Vec dlogits = probs;
            dlogits(sample.class_label) -= 1.0;
            g_w2.noalias() += dlogits * h.transpose();
            g_b2 += dlogits;
            Vec dh = e.w2.transpose() * dlogits;
            Vec dpre = dh.cwiseProduct(pre.unaryExpr([](double v) { return gelu_grad(v); }));
            g_w1.noalias() += dpre * x.transpose();
            g_b1 += dpre;
        }
        const double scale = 1.0 / config.batch_size;
        loss *= scale;
        last_loss = loss;
        if (!std::isfinite(loss)) throw NumericError("train_embedder: non-finite loss");

        const double bc1 = 1.0 - std::pow(config.adam_beta1, step);
        const double bc2 = 1.0 - std::pow(config.adam_beta2, step);
        auto adam = [&](auto& param, auto& grad, auto& m, auto& v) {
            for (Eigen::Index i = 0; i < param.size(); ++i) {
                const double g = grad.data()[i] * scale;
                m.data()[i] = config.adam_beta1 * m.data()[i] + (1.0 - config.adam_beta1) * g;
                v.data()[i] = config.adam_beta2 * v.data()[i] + (1.0 - config.adam_beta2) * g * g;
                param.data()[i] -= config.learning_rate * (m.data()[i] / bc1) /
                                   (std::sqrt(v.data()[i] / bc2) + config.adam_eps);
            }
        };
        adam(e.w1, g_w1, m_w1, v_w1);
        adam(e.b1, g_b1, m_b1, v_b1);
        adam(e.w2, g_w2, m_w2, v_w2);
        adam(e.b2, g_b2, m_b2, v_b2);
    }
    return last_loss;
}

void save_embedder(const ProxyEmbedder& e, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_embedder: cannot open " + path.string());
    ckpt::write_header(out, kCheckpointEmbedder,
                       {static_cast<uint32_t>(e.cfg.input_side),
                        static_cast<uint32_t>(e.cfg.pool_side),
                        static_cast<uint32_t>(e.cfg.hidden_dim),
                        static_cast<uint32_t>(e.cfg.num_classes), ckpt::f32_bits(e.cfg.init_std)});
    ckpt::write_tensor_f32(out, e.w1.data(), static_cast<std::size_t>(e.w1.size()));
    ckpt::write_tensor_f32(out, e.b1.data(), static_cast<std::size_t>(e.b1.size()));
    ckpt::write_tensor_f32(out, e.w2.data(), static_cast<std::size_t>(e.w2.size()));
    ckpt::write_tensor_f32(out, e.b2.data(), static_cast<std::size_t>(e.b2.size()));
    if (!out) throw IoError("save_embedder: write failed");
}

ProxyEmbedder load_embedder(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_embedder: cannot open " + path.string());
    const auto words = ckpt::read_header(in, kCheckpointEmbedder, path);
    if (words.size() != 5) throw ParseError("checkpoint: embedder header must have 5 words");
    EmbedderConfig cfg;
    cfg.input_side = static_cast<int>(words[0]);
    cfg.pool_side = static_cast<int>(words[1]);
    cfg.hidden_dim = static_cast<int>(words[2]);
    cfg.num_classes = static_cast<int>(words[3]);
    cfg.init_std = ckpt::f32_from_bits(words[4]);
    ProxyEmbedder e = init_embedder(cfg, 0);
    ckpt::read_tensor_f32(in, e.w1.data(), static_cast<std::size_t>(e.w1.size()));
    ckpt::read_tensor_f32(in, e.b1.data(), static_cast<std::size_t>(e.b1.size()));
    ckpt::read_tensor_f32(in, e.w2.data(), static_cast<std::size_t>(e.w2.size()));
    ckpt::read_tensor_f32(in, e.b2.data(), static_cast<std::size_t>(e.b2.size()));
    char extra;
    if (in.read(&extra, 1)) throw ParseError("checkpoint: trailing bytes in " + path.string());
    return e;
}

double proxy_struct_distance(const Raster& guide, const Raster& candidate,
                             const ProxyEmbedder& embedder) {
    if (!guide.same_shape(candidate)) throw ShapeError("proxy_struct_distance: size mismatch");
    const Vec fg = embedder_features(embedder, guide);
    const Vec fc = embedder_features(embedder, candidate);
    return (fg - fc).cwiseAbs().mean();
}

double proxy_class_score(int class_label, const Raster& candidate, const ProxyEmbedder& embedder) {
    if (class_label < 0 || class_label >= embedder.cfg.num_classes)
        throw InputError("proxy_class_score: class label out of range");
    return embedder_class_probs(embedder, candidate)(class_label);
}

namespace {

// Min-max normalization to [0,1]; a degenerate all-equal set maps to 0.5.
void minmax_normalize(std::vector<double>& values) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi - lo <= 0.0) {
        std::fill(values.begin(), values.end(), 0.5);
        return;
    }
    for (double& v : values) v = (v - lo) / (hi - lo);
}

}  // namespace

SelectionScores select_index(std::span<const double> struct_raw, std::span<const double> class_raw,
                             double exponent) {
    if (struct_raw.empty() || struct_raw.size() != class_raw.size())
        throw ConfigError("select_index: score lists must be non-empty and parallel");
    SelectionScores out;
    out.norm_struct.assign(struct_raw.begin(), struct_raw.end());
    out.norm_class.assign(class_raw.begin(), class_raw.end());
    minmax_normalize(out.norm_struct);
    minmax_normalize(out.norm_class);
    out.quality.resize(struct_raw.size());
    double best_quality = -1.0;
    for (std::size_t i = 0; i < struct_raw.size(); ++i) {
        out.quality[i] = std::pow(1.0 - out.norm_struct[i], exponent) * out.norm_class[i];
        if (out.quality[i] > best_quality) {
            best_quality = out.quality[i];
            out.best = static_cast<int>(i);
        }
    }
    return out;
}

const TokenGrid& select_best(TrialSet& trials, const Raster& guide, int class_label,
                             const ProxyEmbedder& embedder, double exponent) {
    if (trials.trials.empty()) throw ConfigError("select_best: empty trial set");
    std::vector<double> s_raw, r_raw;
    for (auto& t : trials.trials) {
        t.struct_distance = proxy_struct_distance(guide, t.raster, embedder);
        t.class_score = proxy_class_score(class_label, t.raster, embedder);
        s_raw.push_back(t.struct_distance);
        r_raw.push_back(t.class_score);
    }
    const SelectionScores scores = select_index(s_raw, r_raw, exponent);
    for (std::size_t i = 0; i < trials.trials.size(); ++i) {
        trials.trials[i].norm_struct = scores.norm_struct[i];
        trials.trials[i].norm_class = scores.norm_class[i];
        trials.trials[i].quality = scores.quality[i];
    }
    trials.selected = scores.best;
    return trials.trials[static_cast<std::size_t>(scores.best)].tokens;
}

TrialSet run_trials(const TransformerModel& model, const Codebook& codebook,
                    const ProxyEmbedder& embedder, const Raster& sketch, int class_label,
                    const SamplerConfig& base_config, std::span<const double> guidance_scales,
                    uint64_t seed, int num_threads, double exponent) {
    if (guidance_scales.empty()) throw ConfigError("run_trials: empty guidance scale list");
    const TokenGrid sketch_grid = encode_raster(sketch, codebook);

    TrialSet set;
    set.trials.resize(guidance_scales.size());
    auto run_one = [&](std::size_t r) {
        SamplerConfig cfg = base_config;
        cfg.guidance_scale = guidance_scales[r];
        auto& trial = set.trials[r];
        trial.guidance_scale = guidance_scales[r];
        trial.seed = derive_seed(seed, Stream::kTrial, static_cast<uint64_t>(r));
        trial.tokens = masksketch_sample(model, sketch_grid, class_label, cfg, trial.seed);
        trial.raster = decode_tokens(trial.tokens, codebook);
    };
    const int workers = std::max(1, std::min<int>(num_threads, static_cast<int>(guidance_scales.size())));
    if (workers == 1) {
        for (std::size_t r = 0; r < set.trials.size(); ++r) run_one(r);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                try {
                    std::size_t r;
                    while ((r = next.fetch_add(1)) < set.trials.size()) run_one(r);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        if (failure) std::rethrow_exception(failure);
    }
    select_best(set, sketch, class_label, embedder, exponent);
    return set;
}

void write_trial_csv(const TrialSet& trials, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_trial_csv: cannot open " + path.string());
    out << "trial,guidance_scale,seed,struct_distance,class_score,norm_struct,norm_class,quality,"
           "selected\n";
    for (std::size_t i = 0; i < trials.trials.size(); ++i) {
        const auto& t = trials.trials[i];
        out << i << "," << t.guidance_scale << "," << t.seed << "," << t.struct_distance << ","
            << t.class_score << "," << t.norm_struct << "," << t.norm_class << "," << t.quality
            << "," << (static_cast<int>(i) == trials.selected ? 1 : 0) << "\n";
    }
    if (!out) throw IoError("write_trial_csv: write failed");
}

}  // namespace sketchgen
