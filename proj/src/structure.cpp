#include "sketchgen/structure.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "sketchgen/errors.hpp"
#include "sketchgen/raster.hpp"

namespace sketchgen {

double StructureScores::mean() const {
    if (per_token.empty()) return 0.0;
    double acc = 0.0;
    for (double v : per_token) acc += v;
    return acc / static_cast<double>(per_token.size());
}

double jeffreys(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) throw ShapeError("jeffreys: length mismatch");
    if (u.empty()) throw ShapeError("jeffreys: empty distributions");
    double su = 0.0, sv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (u[i] < 0.0 || v[i] < 0.0) throw InputError("jeffreys: negative probability");
        su += u[i];
        sv += v[i];
    }
    if (std::abs(su - 1.0) > 1e-4 || std::abs(sv - 1.0) > 1e-4)
        throw InputError("jeffreys: inputs must sum to 1 within 1e-4");
    // (u_i - v_i) and log((u_i+eps)/(v_i+eps)) always share a sign, so each
    // term of the symmetrized sum is nonnegative.
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double pu = u[i] / su;
        const double pv = v[i] / sv;
        acc += (pu - pv) * (std::log(pu + kDivergenceSmoothing) - std::log(pv + kDivergenceSmoothing));
    }
    return acc / 2.0;
}

double token_structure_distance(const std::vector<Mat>& guide_maps,
                                const std::vector<Mat>& candidate_maps, int token_index) {
    if (guide_maps.size() != candidate_maps.size())
        throw ConfigError("token_structure_distance: layer count mismatch");
    if (guide_maps.empty()) throw ConfigError("token_structure_distance: empty layer set");
    double total = 0.0;
    for (std::size_t l = 0; l < guide_maps.size(); ++l) {
        const Mat& gx = guide_maps[l];
        const Mat& gy = candidate_maps[l];
        if (gx.rows() != gy.rows() || gx.cols() != gy.cols())
            throw ShapeError("token_structure_distance: map shape mismatch");
        if (token_index < 0 || token_index >= gx.rows())
            throw InputError("token_structure_distance: token index out of range");
        const Eigen::RowVectorXd ru = gx.row(token_index);
        const Eigen::RowVectorXd rv = gy.row(token_index);
        total += jeffreys(std::span<const double>(ru.data(), static_cast<std::size_t>(ru.size())),
                          std::span<const double>(rv.data(), static_cast<std::size_t>(rv.size())));
    }
    return total;
}

StructureScores structure_scores(const TransformerModel& model, const std::vector<Mat>& guide_maps,
                                 const TokenGrid& candidate, const std::vector<int>& layers,
                                 int class_label) {
    if (layers.empty()) throw ConfigError("structure_scores: empty layer set");
    if (guide_maps.size() != layers.size())
        throw ConfigError("structure_scores: guide map count does not match layer set");
    for (int t : candidate.tokens)
        if (t == model.cfg.vocab_size)
            throw InputError("structure_scores: candidate must be fully unmasked");
    const std::vector<Mat> cand_maps = attn_map(model, candidate, layers, class_label);
    for (const Mat& g : guide_maps)
        if (g.rows() != model.cfg.seq_len || g.cols() != model.cfg.seq_len)
            throw ShapeError("structure_scores: guide map dimension mismatch");

    StructureScores scores;
    scores.layers = layers;
    scores.per_token.resize(static_cast<std::size_t>(model.cfg.seq_len));
    for (int i = 0; i < model.cfg.seq_len; ++i)
        scores.per_token[static_cast<std::size_t>(i)] =
            token_structure_distance(guide_maps, cand_maps, i);
    return scores;
}

StructureScores structure_scores(const TransformerModel& model, const TokenGrid& guide,
                                 const TokenGrid& candidate, const std::vector<int>& layers) {
    if (guide.count() != candidate.count())
        throw ShapeError("structure_scores: guide/candidate size mismatch");
    const std::vector<Mat> guide_maps = attn_map(model, guide, layers, guide.class_label);
    return structure_scores(model, guide_maps, candidate, layers, candidate.class_label);
}

namespace {

Raster to_heatmap(const Mat& values, int height, int width) {
    const double lo = values.minCoeff();
    const double hi = values.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    Raster img(height, width);
    for (int r = 0; r < height; ++r)
        for (int c = 0; c < width; ++c)
            img.at(r, c) = static_cast<uint8_t>(
                std::lround(255.0 * (values(r * width + c, 0) - lo) / span));
    return img;
}

}  // namespace

void export_attention_heatmaps(const std::vector<Mat>& maps, const std::vector<int>& layers,
                               const std::filesystem::path& dir, const std::string& prefix) {
    if (maps.size() != layers.size())
        throw ConfigError("export_attention_heatmaps: maps/layers mismatch");
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        const Mat& m = maps[i];
        const double hi = m.maxCoeff();
        const double scale = hi > 0.0 ? 255.0 / hi : 255.0;
        Raster img(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                img.at(static_cast<int>(r), static_cast<int>(c)) =
                    static_cast<uint8_t>(std::lround(m(r, c) * scale));
        save_raster(img, dir / (prefix + "_layer" + std::to_string(layers[i]) + ".pgm"));
    }
}

void export_attention_pca(const Mat& map, int grid_height, int grid_width,
                          const std::filesystem::path& dir, const std::string& prefix) {
    if (map.rows() != map.cols() || map.rows() != grid_height * grid_width)
        throw ShapeError("export_attention_pca: map does not match grid dimensions");
    std::filesystem::create_directories(dir);
    const Mat centered = map.rowwise() - map.colwise().mean();
    const Mat cov = centered.transpose() * centered / static_cast<double>(map.rows());
    Eigen::SelfAdjointEigenSolver<Mat> solver(cov);
    if (solver.info() != Eigen::Success)
        throw NumericError("export_attention_pca: eigendecomposition failed");
    // Eigenvalues ascend; take the top three components.
    for (int comp = 0; comp < 3; ++comp) {
        const Eigen::Index col = cov.cols() - 1 - comp;
        const Mat projected = centered * solver.eigenvectors().col(col);
        save_raster(to_heatmap(projected, grid_height, grid_width),
                    dir / (prefix + "_pc" + std::to_string(comp + 1) + ".pgm"));
    }
}

}  // namespace sketchgen
