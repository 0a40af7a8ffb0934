#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "sketchgen/errors.hpp"
#include "sketchgen/rng.hpp"
#include "sketchgen/structure.hpp"

using namespace sketchgen;

namespace {

std::vector<double> random_distribution(Rng& rng, std::size_t n) {
    std::vector<double> p(n);
    double total = 0.0;
    for (auto& v : p) {
        v = -std::log(std::max(rng.uniform(), 1e-300));  // exponential weights
        total += v;
    }
    for (auto& v : p) v /= total;
    return p;
}

TransformerConfig tiny_config() {
    TransformerConfig cfg;
    cfg.num_layers = 3;
    cfg.num_heads = 2;
    cfg.width = 8;
    cfg.ffn_hidden = 16;
    cfg.vocab_size = 6;
    cfg.num_classes = 3;
    cfg.seq_len = 9;
    cfg.init_std = 0.2;
    return cfg;
}

TokenGrid random_grid(const TransformerConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    TokenGrid grid(3, 3, 0, static_cast<int>(seed % cfg.num_classes));
    for (auto& t : grid.tokens) t = rng.uniform_int(cfg.vocab_size);
    return grid;
}

}  // namespace

TEST_CASE("jeffreys basics: zero at equality, exact symmetry, nonnegative") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const auto u = random_distribution(rng, 16);
        const auto v = random_distribution(rng, 16);
        const double uv = jeffreys(u, v);
        const double vu = jeffreys(v, u);
        CHECK(uv == vu);  // symmetric by construction, bitwise
        CHECK(uv >= 0.0);
        CHECK(jeffreys(u, u) == doctest::Approx(0.0).epsilon(1e-9));
    }
}

TEST_CASE("jeffreys agrees with the direct-summation oracle") {
    const std::vector<double> u = {0.5, 0.5};
    const std::vector<double> v = {0.9, 0.1};
    CHECK(jeffreys(u, v) ==
          doctest::Approx(oracle::jeffreys(u, v, kDivergenceSmoothing)).epsilon(1e-12));

    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const auto a = random_distribution(rng, 12);
        const auto b = random_distribution(rng, 12);
        const double got = jeffreys(a, b);
        const double want = oracle::jeffreys(a, b, kDivergenceSmoothing);
        CHECK(std::abs(got - want) < 1e-9);
    }
}

TEST_CASE("jeffreys validates its inputs") {
    const std::vector<double> u = {0.5, 0.5};
    const std::vector<double> short_v = {1.0};
    CHECK_THROWS_AS(jeffreys(u, short_v), ShapeError);
    const std::vector<double> not_normalized = {0.7, 0.7};
    CHECK_THROWS_AS(jeffreys(u, not_normalized), InputError);
    const std::vector<double> negative = {1.5, -0.5};
    CHECK_THROWS_AS(jeffreys(u, negative), InputError);
}

TEST_CASE("jeffreys handles saturated rows via smoothing") {
    const std::vector<double> u = {1.0, 0.0, 0.0};
    const std::vector<double> v = {0.0, 1.0, 0.0};
    const double d = jeffreys(u, v);
    CHECK(std::isfinite(d));
    CHECK(d > 0.0);
}

TEST_CASE("token distance is additive over layers and zero for equal maps") {
    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 3);
    const TokenGrid gx = random_grid(cfg, 10);
    const TokenGrid gy = random_grid(cfg, 11);
    const auto maps_x = attn_map(model, gx, {1, 2, 3}, gx.class_label);
    const auto maps_y = attn_map(model, gy, {1, 2, 3}, gy.class_label);

    for (int i = 0; i < cfg.seq_len; ++i) {
        CHECK(token_structure_distance(maps_x, maps_x, i) == doctest::Approx(0.0).epsilon(1e-9));
        const double both = token_structure_distance(maps_x, maps_y, i);
        double sum = 0.0;
        for (std::size_t l = 0; l < maps_x.size(); ++l)
            sum += token_structure_distance({maps_x[l]}, {maps_y[l]}, i);
        CHECK(both == doctest::Approx(sum).epsilon(1e-12));
        // single layer degenerates to one jeffreys call
        const Eigen::RowVectorXd ru = maps_x[0].row(i);
        const Eigen::RowVectorXd rv = maps_y[0].row(i);
        const std::vector<double> u(ru.data(), ru.data() + ru.size());
        const std::vector<double> v(rv.data(), rv.data() + rv.size());
        CHECK(token_structure_distance({maps_x[0]}, {maps_y[0]}, i) ==
              doctest::Approx(jeffreys(u, v)).epsilon(1e-12));
    }
}

TEST_CASE("structure_scores: zero against itself, nonnegative for random pairs") {
    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 4);
    const TokenGrid guide = random_grid(cfg, 20);
    const std::vector<int> layers = {1, 3};

    const StructureScores self = structure_scores(model, guide, guide, layers);
    for (double v : self.per_token) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));

    for (uint64_t seed = 30; seed < 40; ++seed) {
        TokenGrid cand = random_grid(cfg, seed);
        cand.class_label = guide.class_label;
        const StructureScores s = structure_scores(model, guide, cand, layers);
        for (double v : s.per_token) {
            CHECK(v >= 0.0);
            CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("structure_scores match a standalone recomputation from raw maps") {
    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 5);
    const TokenGrid guide = random_grid(cfg, 50);
    TokenGrid cand = random_grid(cfg, 51);
    cand.class_label = guide.class_label;
    const std::vector<int> layers = {2, 3};

    const StructureScores s = structure_scores(model, guide, cand, layers);
    const auto gm = attn_map(model, guide, layers, guide.class_label);
    const auto cm = attn_map(model, cand, layers, cand.class_label);
    for (int i = 0; i < cfg.seq_len; ++i) {
        double want = 0.0;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const Eigen::RowVectorXd ru = gm[l].row(i);
            const Eigen::RowVectorXd rv = cm[l].row(i);
            want += oracle::jeffreys(std::vector<double>(ru.data(), ru.data() + ru.size()),
                                     std::vector<double>(rv.data(), rv.data() + rv.size()),
                                     kDivergenceSmoothing);
        }
        CHECK(s.per_token[static_cast<std::size_t>(i)] == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("swapping guide and candidate leaves the scores unchanged") {
    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 6);
    TokenGrid a = random_grid(cfg, 60);
    TokenGrid b = random_grid(cfg, 61);
    b.class_label = a.class_label;
    const std::vector<int> layers = {1, 2, 3};
    const StructureScores ab = structure_scores(model, a, b, layers);
    const StructureScores ba = structure_scores(model, b, a, layers);
    for (int i = 0; i < cfg.seq_len; ++i)
        CHECK(ab.per_token[static_cast<std::size_t>(i)] ==
              doctest::Approx(ba.per_token[static_cast<std::size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("adding a layer never decreases a score") {
    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 7);
    const TokenGrid guide = random_grid(cfg, 70);
    TokenGrid cand = random_grid(cfg, 71);
    cand.class_label = guide.class_label;
    const StructureScores small = structure_scores(model, guide, cand, {1, 2});
    const StructureScores large = structure_scores(model, guide, cand, {1, 2, 3});
    for (int i = 0; i < cfg.seq_len; ++i)
        CHECK(large.per_token[static_cast<std::size_t>(i)] >=
              small.per_token[static_cast<std::size_t>(i)] - 1e-15);
}

TEST_CASE("structure_scores rejects masked candidates and bad shapes") {
    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 8);
    const TokenGrid guide = random_grid(cfg, 80);
    TokenGrid cand = random_grid(cfg, 81);
    cand.tokens[0] = cfg.vocab_size;  // masked
    CHECK_THROWS_AS(structure_scores(model, guide, cand, {1}), InputError);
    CHECK_THROWS_AS(structure_scores(model, guide, guide, std::vector<int>{}), ConfigError);
    CHECK_THROWS_AS(structure_scores(model, guide, guide, {cfg.num_layers + 2}), ConfigError);
}

TEST_CASE("debug exports write heatmaps and pca components") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "sketchgen_tests" / "attn_export";
    fs::remove_all(dir);

    const TransformerConfig cfg = tiny_config();
    TransformerModel model = init_model(cfg, 9);
    const TokenGrid guide = random_grid(cfg, 90);
    const auto maps = attn_map(model, guide, {1, 2}, guide.class_label);
    export_attention_heatmaps(maps, {1, 2}, dir, "guide");
    CHECK(fs::exists(dir / "guide_layer1.pgm"));
    CHECK(fs::exists(dir / "guide_layer2.pgm"));
    export_attention_pca(maps[0], 3, 3, dir, "guide");
    CHECK(fs::exists(dir / "guide_pc1.pgm"));
    CHECK(fs::exists(dir / "guide_pc3.pgm"));
    const Raster heat = load_raster(dir / "guide_layer1.pgm");
    CHECK(heat.height == cfg.seq_len);
    CHECK(heat.width == cfg.seq_len);
}
