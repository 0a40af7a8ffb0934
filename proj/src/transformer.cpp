#include "sketchgen/transformer.hpp"

#include <cmath>

#include "sketchgen/errors.hpp"
#include "sketchgen/rng.hpp"

namespace sketchgen {

void TransformerConfig::validate() const {
    if (num_layers < 1) throw ConfigError("transformer: num_layers must be >= 1");
    if (num_heads < 1) throw ConfigError("transformer: num_heads must be >= 1");
    if (width < 1) throw ConfigError("transformer: width must be >= 1");
    if (width % num_heads != 0) throw ConfigError("transformer: width must be divisible by num_heads");
    if (vocab_size < 2) throw ConfigError("transformer: vocab_size must be >= 2");
    if (num_classes < 1) throw ConfigError("transformer: num_classes must be >= 1");
    if (seq_len < 1) throw ConfigError("transformer: seq_len must be >= 1");
    if (!(init_std > 0.0)) throw ConfigError("transformer: init_std must be positive");
    if (ffn_hidden < 0) throw ConfigError("transformer: ffn_hidden must be >= 0");
}

std::vector<TensorView> tensor_views(TransformerParams& p) {
    std::vector<TensorView> views;
    auto mat = [&](const std::string& name, Mat& m) {
        views.push_back({name, m.data(), m.rows(), m.cols()});
    };
    auto vec = [&](const std::string& name, Vec& v) {
        views.push_back({name, v.data(), v.size(), 1});
    };
    mat("token_embed", p.token_embed);
    mat("pos_embed", p.pos_embed);
    mat("class_embed", p.class_embed);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        auto& lay = p.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        vec(pre + "ln1_gain", lay.ln1_gain);
        vec(pre + "ln1_bias", lay.ln1_bias);
        mat(pre + "w_q", lay.w_q);
        vec(pre + "b_q", lay.b_q);
        mat(pre + "w_k", lay.w_k);
        vec(pre + "b_k", lay.b_k);
        mat(pre + "w_v", lay.w_v);
        vec(pre + "b_v", lay.b_v);
        mat(pre + "w_o", lay.w_o);
        vec(pre + "b_o", lay.b_o);
        vec(pre + "ln2_gain", lay.ln2_gain);
        vec(pre + "ln2_bias", lay.ln2_bias);
        mat(pre + "w_ff1", lay.w_ff1);
        vec(pre + "b_ff1", lay.b_ff1);
        mat(pre + "w_ff2", lay.w_ff2);
        vec(pre + "b_ff2", lay.b_ff2);
    }
    vec("lnf_gain", p.lnf_gain);
    vec("lnf_bias", p.lnf_bias);
    mat("w_out", p.w_out);
    vec("b_out", p.b_out);
    return views;
}

namespace {

TransformerParams make_params(const TransformerConfig& cfg) {
    TransformerParams p;
    const int w = cfg.width, n = cfg.seq_len, k = cfg.vocab_size, hid = cfg.ffn_dim();
    p.token_embed = Mat::Zero(k + 1, w);
    p.pos_embed = Mat::Zero(n, w);
    p.class_embed = Mat::Zero(cfg.num_classes, w);
    p.layers.resize(static_cast<std::size_t>(cfg.num_layers));
    for (auto& lay : p.layers) {
        lay.ln1_gain = Vec::Zero(w);
        lay.ln1_bias = Vec::Zero(w);
        lay.w_q = Mat::Zero(w, w);
        lay.b_q = Vec::Zero(w);
        lay.w_k = Mat::Zero(w, w);
        lay.b_k = Vec::Zero(w);
        lay.w_v = Mat::Zero(w, w);
        lay.b_v = Vec::Zero(w);
        lay.w_o = Mat::Zero(w, w);
        lay.b_o = Vec::Zero(w);
        lay.ln2_gain = Vec::Zero(w);
        lay.ln2_bias = Vec::Zero(w);
        lay.w_ff1 = Mat::Zero(hid, w);
        lay.b_ff1 = Vec::Zero(hid);
        lay.w_ff2 = Mat::Zero(w, hid);
        lay.b_ff2 = Vec::Zero(w);
    }
    p.lnf_gain = Vec::Zero(w);
    p.lnf_bias = Vec::Zero(w);
    p.w_out = Mat::Zero(k, w);
    p.b_out = Vec::Zero(k);
    return p;
}

}  // namespace

TransformerParams zeros_like(const TransformerModel& model) { return make_params(model.cfg); }

TransformerModel init_model(const TransformerConfig& cfg, uint64_t seed) {
    cfg.validate();
    TransformerModel model;
    model.cfg = cfg;
    model.params = make_params(cfg);
    Rng rng(derive_seed(seed, Stream::kModelInit));
    auto fill_gaussian = [&](Mat& m) {
        double* d = m.data();
        for (Eigen::Index i = 0; i < m.size(); ++i) d[i] = cfg.init_std * rng.gaussian();
    };
    auto& p = model.params;
    fill_gaussian(p.token_embed);
    fill_gaussian(p.pos_embed);
    fill_gaussian(p.class_embed);
    for (auto& lay : p.layers) {
        lay.ln1_gain.setOnes();
        lay.ln2_gain.setOnes();
        fill_gaussian(lay.w_q);
        fill_gaussian(lay.w_k);
        fill_gaussian(lay.w_v);
        fill_gaussian(lay.w_o);
        fill_gaussian(lay.w_ff1);
        fill_gaussian(lay.w_ff2);
    }
    p.lnf_gain.setOnes();
    fill_gaussian(p.w_out);
    return model;
}

namespace {

// Row-wise LayerNorm; keeps xhat and 1/std for the backward pass.
void layer_norm_rows(const Mat& x, const Vec& gain, const Vec& bias, Mat& xhat, Vec& inv_std,
                     Mat& out) {
    const Eigen::Index n = x.rows(), w = x.cols();
    xhat.resize(n, w);
    inv_std.resize(n);
    out.resize(n, w);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = x.row(r).mean();
        const double var = (x.row(r).array() - mu).square().mean();
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std(r) = is;
        xhat.row(r) = (x.row(r).array() - mu) * is;
        out.row(r) = xhat.row(r).array() * gain.transpose().array() + bias.transpose().array();
    }
}

// Backward of layer_norm_rows: returns dx, accumulates dgain/dbias.
Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& inv_std, const Vec& gain,
                        Vec& dgain, Vec& dbias) {
    const Eigen::Index n = dy.rows(), w = dy.cols();
    dgain.noalias() += (dy.array() * xhat.array()).colwise().sum().matrix().transpose();
    dbias.noalias() += dy.colwise().sum().transpose();
    Mat dx(n, w);
    for (Eigen::Index r = 0; r < n; ++r) {
        const auto dxhat = dy.row(r).array() * gain.transpose().array();
        const double m1 = dxhat.mean();
        const double m2 = (dxhat * xhat.row(r).array()).mean();
        dx.row(r) = inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
    }
    return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// Row-wise softmax with max subtraction.
void softmax_rows(Mat& scores) {
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        const double mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
    }
}

void check_inputs(const TransformerModel& model, const TokenGrid& grid, int class_label) {
    const auto& cfg = model.cfg;
    if (grid.count() != cfg.seq_len || static_cast<int>(grid.tokens.size()) != grid.count())
        throw ShapeError("forward: grid token count does not match model seq_len");
    if (class_label < 0 || class_label >= cfg.num_classes)
        throw InputError("forward: class label out of range");
    for (int t : grid.tokens)
        if (t < 0 || t > cfg.vocab_size) throw InputError("forward: token index out of range");
}

enum class RunMode { kLogitsOnly, kWithAttention, kFullCache };

void run_forward(const TransformerModel& model, const TokenGrid& grid, int class_label,
                 RunMode mode, Mat& logits, AttentionStack* attn, ForwardCache* cache) {
    check_inputs(model, grid, class_label);
    const auto& cfg = model.cfg;
    const auto& p = model.params;
    const int n = cfg.seq_len, w = cfg.width, heads = cfg.num_heads, dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat h(n, w);
    for (int i = 0; i < n; ++i)
        h.row(i) = p.token_embed.row(grid.tokens[static_cast<std::size_t>(i)]) + p.pos_embed.row(i) +
                   p.class_embed.row(class_label);

    if (attn) attn->heads.assign(static_cast<std::size_t>(cfg.num_layers), {});
    if (cache) {
        cache->tokens = grid.tokens;
        cache->class_label = class_label;
        cache->embedded = h;
        cache->layers.assign(static_cast<std::size_t>(cfg.num_layers), {});
    }

    Mat ln_out, xhat, q, k, v, concat(n, w), scores;
    Vec inv_std;
    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& lay = p.layers[static_cast<std::size_t>(l)];
        LayerCache* lc = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
        if (lc) lc->input = h;

        layer_norm_rows(h, lay.ln1_gain, lay.ln1_bias, xhat, inv_std, ln_out);
        if (lc) {
            lc->ln1_xhat = xhat;
            lc->ln1_inv_std = inv_std;
        }
        q.noalias() = ln_out * lay.w_q.transpose();
        q.rowwise() += lay.b_q.transpose();
        k.noalias() = ln_out * lay.w_k.transpose();
        k.rowwise() += lay.b_k.transpose();
        v.noalias() = ln_out * lay.w_v.transpose();
        v.rowwise() += lay.b_v.transpose();
        if (lc) {
            lc->q = q;
            lc->k = k;
            lc->v = v;
            lc->probs.resize(static_cast<std::size_t>(heads));
        }
        for (int hd = 0; hd < heads; ++hd) {
            const auto qh = q.middleCols(hd * dh, dh);
            const auto kh = k.middleCols(hd * dh, dh);
            const auto vh = v.middleCols(hd * dh, dh);
            scores.noalias() = qh * kh.transpose();
            scores *= inv_sqrt_dh;
            softmax_rows(scores);
            concat.middleCols(hd * dh, dh).noalias() = scores * vh;
            if (attn) attn->heads[static_cast<std::size_t>(l)].push_back(scores);
            if (lc) lc->probs[static_cast<std::size_t>(hd)] = scores;
        }
        if (lc) lc->attn_concat = concat;
        h.noalias() += concat * lay.w_o.transpose();
        h.rowwise() += lay.b_o.transpose();
        if (lc) lc->mid = h;

        layer_norm_rows(h, lay.ln2_gain, lay.ln2_bias, xhat, inv_std, ln_out);
        if (lc) {
            lc->ln2_xhat = xhat;
            lc->ln2_inv_std = inv_std;
        }
        Mat f1 = ln_out * lay.w_ff1.transpose();
        f1.rowwise() += lay.b_ff1.transpose();
        Mat act = f1.unaryExpr([](double x) { return gelu(x); });
        if (lc) {
            lc->ffn_pre = f1;
            lc->ffn_act = act;
        }
        h.noalias() += act * lay.w_ff2.transpose();
        h.rowwise() += lay.b_ff2.transpose();
    }

    if (cache) cache->final_input = h;
    layer_norm_rows(h, p.lnf_gain, p.lnf_bias, xhat, inv_std, ln_out);
    if (cache) {
        cache->lnf_xhat = xhat;
        cache->lnf_inv_std = inv_std;
        cache->final_norm = ln_out;
    }
    logits.noalias() = ln_out * p.w_out.transpose();
    logits.rowwise() += p.b_out.transpose();
    if (!logits.allFinite()) throw NumericError("forward: non-finite logits");
    if (cache) cache->logits = logits;
    (void)mode;
}

// ln_out is recomputable from xhat but the backward pass needs it as the
// matmul input for weight gradients; rebuild it on the fly.
Mat apply_gain_bias(const Mat& xhat, const Vec& gain, const Vec& bias) {
    Mat out = xhat;
    out.array().rowwise() *= gain.transpose().array();
    out.array().rowwise() += bias.transpose().array();
    return out;
}

}  // namespace

ForwardResult forward(const TransformerModel& model, const TokenGrid& grid, int class_label,
                      bool capture_attention) {
    ForwardResult result;
    run_forward(model, grid, class_label,
                capture_attention ? RunMode::kWithAttention : RunMode::kLogitsOnly, result.logits,
                capture_attention ? &result.attn : nullptr, nullptr);
    return result;
}

Mat AttentionStack::layer_average(int layer_id) const {
    if (layer_id < 1 || layer_id > num_layers())
        throw ConfigError("layer_average: layer id out of range");
    const auto& hs = heads[static_cast<std::size_t>(layer_id - 1)];
    if (hs.empty()) throw ConfigError("layer_average: empty attention stack");
    Mat avg = hs[0];
    for (std::size_t i = 1; i < hs.size(); ++i) avg += hs[i];
    avg /= static_cast<double>(hs.size());
    return avg;
}

std::vector<Mat> attn_map(const TransformerModel& model, const TokenGrid& grid,
                          const std::vector<int>& layers, int class_label) {
    if (layers.empty()) throw ConfigError("attn_map: empty layer set");
    for (int l : layers)
        if (l < 1 || l > model.cfg.num_layers)
            throw ConfigError("attn_map: layer id " + std::to_string(l) + " out of range");
    const ForwardResult res = forward(model, grid, class_label, true);
    std::vector<Mat> maps;
    maps.reserve(layers.size());
    for (int l : layers) maps.push_back(res.attn.layer_average(l));
    return maps;
}

void forward_cached(const TransformerModel& model, const TokenGrid& grid, int class_label,
                    ForwardCache& cache) {
    Mat logits;
    run_forward(model, grid, class_label, RunMode::kFullCache, logits, nullptr, &cache);
}

void backward(const TransformerModel& model, const ForwardCache& cache, const Mat& dlogits,
              TransformerParams& grads) {
    const auto& cfg = model.cfg;
    const auto& p = model.params;
    const int n = cfg.seq_len, heads = cfg.num_heads, dh = cfg.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    if (dlogits.rows() != n || dlogits.cols() != cfg.vocab_size)
        throw ShapeError("backward: dlogits shape mismatch");

    grads.w_out.noalias() += dlogits.transpose() * cache.final_norm;
    grads.b_out.noalias() += dlogits.colwise().sum().transpose();
    Mat dnorm = dlogits * p.w_out;
    Mat dh_acc = layer_norm_backward(dnorm, cache.lnf_xhat, cache.lnf_inv_std, p.lnf_gain,
                                     grads.lnf_gain, grads.lnf_bias);

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& lay = p.layers[static_cast<std::size_t>(l)];
        auto& glay = grads.layers[static_cast<std::size_t>(l)];
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];

        // FFN block: out = mid + GELU(LN2(mid)) W2^T + b2
        const Mat ln2_out = apply_gain_bias(lc.ln2_xhat, lay.ln2_gain, lay.ln2_bias);
        glay.w_ff2.noalias() += dh_acc.transpose() * lc.ffn_act;
        glay.b_ff2.noalias() += dh_acc.colwise().sum().transpose();
        Mat dact = dh_acc * lay.w_ff2;
        Mat df1 = dact.cwiseProduct(lc.ffn_pre.unaryExpr([](double x) { return gelu_grad(x); }));
        glay.w_ff1.noalias() += df1.transpose() * ln2_out;
        glay.b_ff1.noalias() += df1.colwise().sum().transpose();
        Mat dln2 = df1 * lay.w_ff1;
        dh_acc.noalias() += layer_norm_backward(dln2, lc.ln2_xhat, lc.ln2_inv_std, lay.ln2_gain,
                                                glay.ln2_gain, glay.ln2_bias);

        // Attention block: mid = input + concat(heads) W_o^T + b_o
        const Mat ln1_out = apply_gain_bias(lc.ln1_xhat, lay.ln1_gain, lay.ln1_bias);
        glay.w_o.noalias() += dh_acc.transpose() * lc.attn_concat;
        glay.b_o.noalias() += dh_acc.colwise().sum().transpose();
        Mat dconcat = dh_acc * lay.w_o;
        Mat dq = Mat::Zero(n, cfg.width), dk = Mat::Zero(n, cfg.width), dv = Mat::Zero(n, cfg.width);
        for (int hd = 0; hd < heads; ++hd) {
            const auto qh = lc.q.middleCols(hd * dh, dh);
            const auto kh = lc.k.middleCols(hd * dh, dh);
            const auto vh = lc.v.middleCols(hd * dh, dh);
            const Mat& probs = lc.probs[static_cast<std::size_t>(hd)];
            const auto doh = dconcat.middleCols(hd * dh, dh);
            Mat dprobs = doh * vh.transpose();
            dv.middleCols(hd * dh, dh).noalias() = probs.transpose() * doh;
            Mat dscores(n, n);
            for (int r = 0; r < n; ++r) {
                const double dot = dprobs.row(r).dot(probs.row(r));
                dscores.row(r) = probs.row(r).array() * (dprobs.row(r).array() - dot);
            }
            dq.middleCols(hd * dh, dh).noalias() = dscores * kh * inv_sqrt_dh;
            dk.middleCols(hd * dh, dh).noalias() = dscores.transpose() * qh * inv_sqrt_dh;
        }
        glay.w_q.noalias() += dq.transpose() * ln1_out;
        glay.b_q.noalias() += dq.colwise().sum().transpose();
        glay.w_k.noalias() += dk.transpose() * ln1_out;
        glay.b_k.noalias() += dk.colwise().sum().transpose();
        glay.w_v.noalias() += dv.transpose() * ln1_out;
        glay.b_v.noalias() += dv.colwise().sum().transpose();
        Mat dln1 = dq * lay.w_q + dk * lay.w_k + dv * lay.w_v;
        dh_acc.noalias() += layer_norm_backward(dln1, lc.ln1_xhat, lc.ln1_inv_std, lay.ln1_gain,
                                                glay.ln1_gain, glay.ln1_bias);
    }

    for (int i = 0; i < n; ++i)
        grads.token_embed.row(cache.tokens[static_cast<std::size_t>(i)]) += dh_acc.row(i);
    grads.pos_embed.noalias() += dh_acc;
    grads.class_embed.row(cache.class_label) += dh_acc.colwise().sum();
}

}  // namespace sketchgen
