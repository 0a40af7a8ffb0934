#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "sketchgen/errors.hpp"
#include "sketchgen/rejection.hpp"

using namespace sketchgen;

namespace {

EmbedderConfig small_embedder_config() {
    EmbedderConfig cfg;
    cfg.input_side = 32;
    cfg.pool_side = 4;
    cfg.hidden_dim = 32;
    cfg.num_classes = 5;
    return cfg;
}

// Exhaustive reimplementation of the selection rule, kept independent of
// select_index: explicit min-max, explicit quality loop.
int brute_force_select(const std::vector<double>& s_raw, const std::vector<double>& r_raw,
                       double exponent) {
    auto normalize = [](std::vector<double> v) {
        double lo = v[0], hi = v[0];
        for (double x : v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        for (double& x : v) x = hi > lo ? (x - lo) / (hi - lo) : 0.5;
        return v;
    };
    const auto sn = normalize(s_raw);
    const auto rn = normalize(r_raw);
    int best = 0;
    double best_q = -1.0;
    for (std::size_t i = 0; i < sn.size(); ++i) {
        const double q = std::pow(1.0 - sn[i], exponent) * rn[i];
        if (q > best_q) {
            best_q = q;
            best = static_cast<int>(i);
        }
    }
    return best;
}

}  // namespace

TEST_CASE("uniform-logit embedder gives uniform class probabilities") {
    const EmbedderConfig cfg = small_embedder_config();
    ProxyEmbedder e = init_embedder(cfg, 1);
    e.w2.setZero();
    e.b2.setZero();
    const auto samples = generate_dataset(3, 5, 32, 4);
    for (const auto& s : samples) {
        const Vec probs = embedder_class_probs(e, s.filled);
        CHECK(probs.sum() == doctest::Approx(1.0).epsilon(1e-6));
        for (int c = 0; c < cfg.num_classes; ++c)
            CHECK(probs(c) == doctest::Approx(1.0 / cfg.num_classes).epsilon(1e-9));
        CHECK(proxy_class_score(2, s.filled, e) ==
              doctest::Approx(1.0 / cfg.num_classes).epsilon(1e-9));
    }
}

TEST_CASE("class probabilities always sum to one") {
    ProxyEmbedder e = init_embedder(small_embedder_config(), 2);
    const auto samples = generate_dataset(10, 5, 32, 5);
    for (const auto& s : samples)
        CHECK(embedder_class_probs(e, s.filled).sum() == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS(proxy_class_score(5, samples[0].filled, e), InputError);
    CHECK_THROWS_AS(proxy_class_score(-1, samples[0].filled, e), InputError);
}

TEST_CASE("proxy distance: zero at identity, symmetric, matches feature dump") {
    ProxyEmbedder e = init_embedder(small_embedder_config(), 3);
    const auto samples = generate_dataset(6, 3, 32, 6);
    CHECK(proxy_struct_distance(samples[0].filled, samples[0].filled, e) == 0.0);
    for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
        const auto& a = samples[i].filled;
        const auto& b = samples[i + 1].filled;
        const double ab = proxy_struct_distance(a, b, e);
        CHECK(ab == proxy_struct_distance(b, a, e));
        CHECK(ab >= 0.0);
        // feature dump + external mean-abs-diff
        const Vec fa = embedder_features(e, a);
        const Vec fb = embedder_features(e, b);
        double acc = 0.0;
        for (Eigen::Index k = 0; k < fa.size(); ++k) acc += std::abs(fa(k) - fb(k));
        CHECK(ab == doctest::Approx(acc / static_cast<double>(fa.size())).epsilon(1e-12));
    }
    Raster wrong(16, 16);
    CHECK_THROWS_AS(proxy_struct_distance(samples[0].filled, wrong, e), ShapeError);
}

TEST_CASE("embedder training separates the shape classes") {
    const auto train_set = generate_dataset(200, 5, 32, 11);
    const auto held_out = generate_dataset(100, 5, 32, 12);
    ProxyEmbedder e = init_embedder(small_embedder_config(), 4);
    EmbedderTrainConfig tc;
    tc.steps = 300;
    tc.seed = 9;
    train_embedder(e, train_set, tc);

    double mean_true = 0.0;
    for (const auto& s : held_out) mean_true += proxy_class_score(s.class_label, s.filled, e);
    mean_true /= static_cast<double>(held_out.size());
    CHECK(mean_true > 2.0 / 5.0);  // twice the uniform probability
}

TEST_CASE("embedder training is deterministic and round-trips through disk") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "sketchgen_tests" / "embedder";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const auto data = generate_dataset(40, 5, 32, 21);
    EmbedderTrainConfig tc;
    tc.steps = 50;
    ProxyEmbedder a = init_embedder(small_embedder_config(), 5);
    ProxyEmbedder b = init_embedder(small_embedder_config(), 5);
    train_embedder(a, data, tc);
    train_embedder(b, data, tc);
    CHECK(a.w1 == b.w1);
    CHECK(a.w2 == b.w2);

    save_embedder(a, dir / "embed.ckpt");
    const ProxyEmbedder loaded = load_embedder(dir / "embed.ckpt");
    CHECK(loaded.cfg.hidden_dim == a.cfg.hidden_dim);
    for (Eigen::Index i = 0; i < a.w1.size(); ++i)
        CHECK(loaded.w1.data()[i] == doctest::Approx(a.w1.data()[i]).epsilon(1e-6));
}

TEST_CASE("selection rule: brute force agreement and edge cases") {
    // R = 1 returns the sole candidate
    const SelectionScores sole = select_index(std::vector<double>{3.0}, std::vector<double>{0.1});
    CHECK(sole.best == 0);

    // a candidate dominating on both normalized axes always wins
    const SelectionScores dom = select_index(std::vector<double>{0.1, 0.5, 0.9},
                                             std::vector<double>{0.9, 0.5, 0.2});
    CHECK(dom.best == 0);

    Rng rng(31);
    for (int trial = 0; trial < 300; ++trial) {
        const int r = 2 + rng.uniform_int(5);
        std::vector<double> s(static_cast<std::size_t>(r)), c(static_cast<std::size_t>(r));
        for (auto& v : s) v = rng.uniform(0.0, 3.0);
        for (auto& v : c) v = rng.uniform();
        const double exponent = trial % 3 ? 2.0 : 1.0;
        const SelectionScores got = select_index(s, c, exponent);
        CHECK(got.best == brute_force_select(s, c, exponent));

        // scale invariance of the structure scores
        std::vector<double> scaled = s;
        for (auto& v : scaled) v *= 37.5;
        CHECK(select_index(scaled, c, exponent).best == got.best);
    }
    CHECK_THROWS_AS(select_index(std::vector<double>{}, std::vector<double>{}), ConfigError);
}

TEST_CASE("degenerate all-equal scores normalize to one half") {
    const SelectionScores s = select_index(std::vector<double>{2.0, 2.0, 2.0},
                                           std::vector<double>{0.3, 0.8, 0.8});
    for (double v : s.norm_struct) CHECK(v == 0.5);
    CHECK(s.best == 1);  // class score decides; ties to the lowest index
}

TEST_CASE("run_trials: sizes, determinism, csv export") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "sketchgen_tests" / "trials";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const Codebook cb = make_default_codebook(4);
    TransformerConfig mc;
    mc.num_layers = 2;
    mc.num_heads = 2;
    mc.width = 8;
    mc.ffn_hidden = 16;
    mc.vocab_size = cb.size();
    mc.num_classes = 3;
    mc.seq_len = 64;
    TransformerModel model = init_model(mc, 17);

    EmbedderConfig ec = small_embedder_config();
    ec.num_classes = 3;
    ProxyEmbedder embedder = init_embedder(ec, 18);

    const auto data = generate_dataset(2, 3, 32, 40);
    SamplerConfig sc;
    sc.iterations = 3;
    sc.lambda_s = 0.5;
    sc.layers = {1, 2};

    const std::vector<double> one_scale = {0.0};
    const TrialSet single =
        run_trials(model, cb, embedder, data[0].sketch, 0, sc, one_scale, 7);
    CHECK(single.trials.size() == 1);
    CHECK(single.selected == 0);

    const TrialSet a = run_trials(model, cb, embedder, data[0].sketch, 0, sc,
                                  kDefaultGuidanceScales, 7, 1);
    const TrialSet b = run_trials(model, cb, embedder, data[0].sketch, 0, sc,
                                  kDefaultGuidanceScales, 7, 4);
    REQUIRE(a.trials.size() == 4);
    CHECK(a.selected == b.selected);
    for (std::size_t i = 0; i < a.trials.size(); ++i) {
        CHECK(a.trials[i].tokens == b.trials[i].tokens);
        CHECK(a.trials[i].guidance_scale == kDefaultGuidanceScales[i]);
    }

    // selection agrees with recomputing the rule from the raw scores
    std::vector<double> s_raw, r_raw;
    for (const auto& t : a.trials) {
        s_raw.push_back(t.struct_distance);
        r_raw.push_back(t.class_score);
    }
    CHECK(a.selected == brute_force_select(s_raw, r_raw, 2.0));

    write_trial_csv(a, dir / "trials.csv");
    CHECK(fs::exists(dir / "trials.csv"));

    CHECK_THROWS_AS(
        run_trials(model, cb, embedder, data[0].sketch, 0, sc, std::vector<double>{}, 7),
        ConfigError);
}
