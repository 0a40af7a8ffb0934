#include "sketchgen/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

#include "sketchgen/checkpoint.hpp"
#include "sketchgen/errors.hpp"

namespace sketchgen {

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (steps < 0) throw ConfigError("train: steps must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be > 0");
    if (!(mask_rate_min > 0.0 && mask_rate_max < 1.0 && mask_rate_min <= mask_rate_max))
        throw ConfigError("train: mask rates must satisfy 0 < min <= max < 1");
    if (class_drop_prob != 0.0) throw ConfigError("train: class_drop_prob is reserved, must be 0");
    if (num_threads < 1) throw ConfigError("train: num_threads must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
}

LossStats masked_lm_loss_grad(const TransformerModel& model, const TokenGrid& masked_grid,
                              const std::vector<int>& targets, const std::vector<uint8_t>& mask,
                              double denom, TransformerParams* grads) {
    const int n = model.cfg.seq_len, k = model.cfg.vocab_size;
    if (static_cast<int>(targets.size()) != n || static_cast<int>(mask.size()) != n)
        throw ShapeError("masked_lm_loss_grad: targets/mask length mismatch");
    ForwardCache cache;
    forward_cached(model, masked_grid, masked_grid.class_label, cache);

    LossStats stats;
    Mat dlogits = Mat::Zero(n, k);
    for (int i = 0; i < n; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) continue;
        const int target = targets[static_cast<std::size_t>(i)];
        if (target < 0 || target >= k) throw InputError("masked_lm_loss_grad: target out of range");
        const auto row = cache.logits.row(i);
        const double mx = row.maxCoeff();
        const double lse = mx + std::log((row.array() - mx).exp().sum());
        stats.loss_sum += lse - row(target);
        ++stats.masked;
        Eigen::Index argmax;
        row.maxCoeff(&argmax);
        if (static_cast<int>(argmax) == target) ++stats.correct;
        if (grads) {
            dlogits.row(i) = (row.array() - lse).exp() / denom;
            dlogits(i, target) -= 1.0 / denom;
        }
    }
    if (grads) backward(model, cache, dlogits, *grads);
    return stats;
}

namespace {

struct MaskedItem {
    TokenGrid masked;
    std::vector<int> targets;
    std::vector<uint8_t> mask;
};

MaskedItem make_masked_item(const TokenGrid& grid, double mask_rate, int mask_token, Rng& rng) {
    MaskedItem item;
    item.targets = grid.tokens;
    const std::size_t n = grid.tokens.size();
    item.mask.assign(n, 0);
    // Resample until at least one position is masked; bounded fallback so a
    // pathological rate cannot spin forever.
    for (int attempt = 0; attempt < 1000; ++attempt) {
        int count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            item.mask[i] = rng.uniform() < mask_rate ? 1 : 0;
            count += item.mask[i];
        }
        if (count > 0) break;
        if (attempt == 999) item.mask[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n)))] = 1;
    }
    item.masked = grid;
    for (std::size_t i = 0; i < n; ++i)
        if (item.mask[i]) item.masked.tokens[i] = mask_token;
    return item;
}

// Fixed chunk count: gradient reduction order never depends on how many
// threads actually ran.
constexpr int kGradChunks = 4;

}  // namespace

StepResult masked_lm_step(const TransformerModel& model, std::span<const TokenGrid> batch,
                          double mask_rate, Rng& rng, int num_threads) {
    if (batch.empty()) throw ConfigError("masked_lm_step: empty batch");
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
        throw ConfigError("masked_lm_step: mask_rate must be in (0,1)");
    const int mask_token = model.cfg.vocab_size;

    std::vector<MaskedItem> items;
    items.reserve(batch.size());
    for (const auto& grid : batch) items.push_back(make_masked_item(grid, mask_rate, mask_token, rng));
    int total_masked = 0;
    for (const auto& it : items)
        total_masked += static_cast<int>(std::count(it.mask.begin(), it.mask.end(), 1));

    const int chunks = std::min<int>(kGradChunks, static_cast<int>(items.size()));
    std::vector<TransformerParams> chunk_grads;
    std::vector<LossStats> chunk_stats(static_cast<std::size_t>(chunks));
    chunk_grads.reserve(static_cast<std::size_t>(chunks));
    for (int c = 0; c < chunks; ++c) chunk_grads.push_back(zeros_like(model));

    auto run_chunk = [&](int c) {
        const std::size_t lo = items.size() * static_cast<std::size_t>(c) / chunks;
        const std::size_t hi = items.size() * static_cast<std::size_t>(c + 1) / chunks;
        for (std::size_t i = lo; i < hi; ++i) {
            const LossStats s =
                masked_lm_loss_grad(model, items[i].masked, items[i].targets, items[i].mask,
                                    static_cast<double>(total_masked), &chunk_grads[c]);
            chunk_stats[c].loss_sum += s.loss_sum;
            chunk_stats[c].masked += s.masked;
            chunk_stats[c].correct += s.correct;
        }
    };
    const int workers = std::max(1, std::min(num_threads, chunks));
    if (workers == 1) {
        for (int c = 0; c < chunks; ++c) run_chunk(c);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        std::exception_ptr failure;
        std::mutex failure_mutex;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                try {
                    int c;
                    while ((c = next.fetch_add(1)) < chunks) run_chunk(c);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        if (failure) std::rethrow_exception(failure);
    }

    StepResult result;
    result.grads = std::move(chunk_grads[0]);
    auto views = tensor_views(result.grads);
    for (int c = 1; c < chunks; ++c) {
        auto other = tensor_views(chunk_grads[static_cast<std::size_t>(c)]);
        for (std::size_t v = 0; v < views.size(); ++v)
            for (Eigen::Index i = 0; i < views[v].size(); ++i) views[v].data[i] += other[v].data[i];
    }
    LossStats total;
    for (const auto& s : chunk_stats) {
        total.loss_sum += s.loss_sum;
        total.masked += s.masked;
        total.correct += s.correct;
    }
    result.masked_positions = total.masked;
    result.loss = total.loss_sum / std::max(1, total.masked);
    result.masked_accuracy = static_cast<double>(total.correct) / std::max(1, total.masked);
    return result;
}

TrainReport train(TransformerModel& model, std::span<const TokenGrid> dataset,
                  const TrainConfig& config) {
    config.validate();
    if (dataset.empty()) throw ConfigError("train: empty dataset");
    for (const auto& g : dataset) {
        if (g.count() != model.cfg.seq_len) throw ShapeError("train: grid size mismatch");
        for (int t : g.tokens)
            if (t < 0 || t >= model.cfg.vocab_size)
                throw InputError("train: dataset token outside model codebook");
    }

    TrainReport report;
    if (config.steps == 0) return report;

    Rng rng(derive_seed(config.seed, Stream::kTraining));
    TransformerParams m1 = zeros_like(model);
    TransformerParams m2 = zeros_like(model);
    auto views_p = tensor_views(model.params);
    auto views_m1 = tensor_views(m1);
    auto views_m2 = tensor_views(m2);

    std::vector<TokenGrid> batch(static_cast<std::size_t>(config.batch_size));
    for (int step = 1; step <= config.steps; ++step) {
        for (auto& slot : batch)
            slot = dataset[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(dataset.size())))];
        const double rate = rng.uniform(config.mask_rate_min, config.mask_rate_max);
        StepResult sr = masked_lm_step(model, batch, rate, rng, config.num_threads);
        if (!std::isfinite(sr.loss))
            throw NumericError("train: non-finite loss at step " + std::to_string(step));

        auto views_g = tensor_views(sr.grads);
        const double bc1 = 1.0 - std::pow(config.adam_beta1, step);
        const double bc2 = 1.0 - std::pow(config.adam_beta2, step);
        for (std::size_t v = 0; v < views_p.size(); ++v) {
            double* p = views_p[v].data;
            double* g = views_g[v].data;
            double* mm = views_m1[v].data;
            double* vv = views_m2[v].data;
            const Eigen::Index count = views_p[v].size();
            for (Eigen::Index i = 0; i < count; ++i) {
                mm[i] = config.adam_beta1 * mm[i] + (1.0 - config.adam_beta1) * g[i];
                vv[i] = config.adam_beta2 * vv[i] + (1.0 - config.adam_beta2) * g[i] * g[i];
                p[i] -= config.learning_rate * (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + config.adam_eps);
            }
        }

        if (step == 1 || step == config.steps || step % std::max(1, config.log_every) == 0)
            report.curve.push_back({step, sr.loss, sr.masked_accuracy});
        if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() &&
            step % config.checkpoint_every == 0) {
            std::filesystem::create_directories(config.checkpoint_dir);
            save_model(model, config.checkpoint_dir / ("step_" + std::to_string(step) + ".ckpt"));
        }
    }
    return report;
}

void write_loss_csv(const TrainReport& report, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("write_loss_csv: cannot open " + path.string());
    out << "step,loss,masked_accuracy\n";
    for (const auto& row : report.curve)
        out << row.step << "," << row.loss << "," << row.masked_accuracy << "\n";
    if (!out) throw IoError("write_loss_csv: write failed");
}

MaskedEval eval_masked_accuracy(const TransformerModel& model, std::span<const TokenGrid> dataset,
                                double mask_rate, uint64_t seed) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0))
        throw ConfigError("eval_masked_accuracy: mask_rate must be in (0,1)");
    Rng rng(derive_seed(seed, Stream::kEval));
    const int mask_token = model.cfg.vocab_size;

    std::vector<MaskedItem> items;
    items.reserve(dataset.size());
    std::vector<long> token_counts(static_cast<std::size_t>(model.cfg.vocab_size), 0);
    for (const auto& grid : dataset) {
        items.push_back(make_masked_item(grid, mask_rate, mask_token, rng));
        const auto& it = items.back();
        for (std::size_t i = 0; i < it.mask.size(); ++i)
            if (it.mask[i]) ++token_counts[static_cast<std::size_t>(it.targets[i])];
    }
    const int majority_token = static_cast<int>(
        std::max_element(token_counts.begin(), token_counts.end()) - token_counts.begin());

    MaskedEval eval;
    long correct = 0, majority_correct = 0, total = 0;
    for (const auto& it : items) {
        const LossStats s =
            masked_lm_loss_grad(model, it.masked, it.targets, it.mask, 1.0, nullptr);
        correct += s.correct;
        total += s.masked;
        for (std::size_t i = 0; i < it.mask.size(); ++i)
            if (it.mask[i] && it.targets[i] == majority_token) ++majority_correct;
    }
    eval.positions = static_cast<int>(total);
    if (total > 0) {
        eval.accuracy = static_cast<double>(correct) / static_cast<double>(total);
        eval.majority_baseline = static_cast<double>(majority_correct) / static_cast<double>(total);
    }
    return eval;
}

double max_rel_grad_error(const std::function<double()>& loss, std::span<double*> probed_params,
                          std::span<const double> analytic, double epsilon) {
    if (!(epsilon > 0.0)) throw InputError("max_rel_grad_error: epsilon must be positive");
    if (probed_params.size() != analytic.size())
        throw ShapeError("max_rel_grad_error: probe/analytic size mismatch");
    double worst = 0.0;
    for (std::size_t i = 0; i < probed_params.size(); ++i) {
        double* p = probed_params[i];
        const double original = *p;
        *p = original + epsilon;
        const double up = loss();
        *p = original - epsilon;
        const double down = loss();
        *p = original;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double err = std::abs(analytic[i] - numeric) / (std::abs(numeric) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

double grad_check(TransformerModel& model, const TokenGrid& sample, double epsilon, int num_probes,
                  uint64_t seed) {
    if (!(epsilon > 0.0)) throw InputError("grad_check: epsilon must be positive");
    if (num_probes < 1) throw ConfigError("grad_check: need at least one probe");
    Rng rng(derive_seed(seed, Stream::kTraining, 0xfd));
    const MaskedItem item = make_masked_item(sample, 0.5, model.cfg.vocab_size, rng);

    TransformerParams grads = zeros_like(model);
    const LossStats stats = masked_lm_loss_grad(model, item.masked, item.targets, item.mask,
                                                1.0, &grads);
    const double denom = static_cast<double>(std::max(1, stats.masked));

    auto param_views = tensor_views(model.params);
    auto grad_views = tensor_views(grads);
    Eigen::Index total = 0;
    for (const auto& v : param_views) total += v.size();

    std::vector<double*> probes;
    std::vector<double> analytic;
    for (int probe = 0; probe < num_probes; ++probe) {
        Eigen::Index flat = static_cast<Eigen::Index>(
            rng.next_u64() % static_cast<uint64_t>(total));
        for (std::size_t v = 0; v < param_views.size(); ++v) {
            if (flat < param_views[v].size()) {
                probes.push_back(param_views[v].data + flat);
                analytic.push_back(grad_views[v].data[flat] / denom);
                break;
            }
            flat -= param_views[v].size();
        }
    }
    auto loss_fn = [&]() {
        return masked_lm_loss_grad(model, item.masked, item.targets, item.mask, 1.0, nullptr)
                   .loss_sum /
               denom;
    };
    return max_rel_grad_error(loss_fn, probes, analytic, epsilon);
}

}  // namespace sketchgen
