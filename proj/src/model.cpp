#include "tvlab/model.hpp"

#include "tvlab/hash.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace tvlab {

namespace {

constexpr double kNormEpsilon = 1e-5;

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

struct NormCache {
    Matrix xhat;
    Vector rstd;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache) {
    const Vector mean = x.rowwise().mean();
    Matrix centered = x.colwise() - mean;
    const Vector var = centered.array().square().rowwise().mean();
    const Vector rstd = (var.array() + kNormEpsilon).rsqrt();
    centered.array().colwise() *= rstd.array();
    Matrix y = (centered.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
    if (cache) {
        cache->xhat = std::move(centered);
        cache->rstd = rstd;
    }
    return y;
}

// Returns dx; accumulates gain/bias gradients.
Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const Matrix& gain, Matrix& dgain,
                           Matrix& dbias) {
    dgain.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
    const Vector mean_dxhat = dxhat.rowwise().mean();
    const Vector mean_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().mean();
    Matrix dx = dxhat.colwise() - mean_dxhat;
    dx -= (cache.xhat.array().colwise() * mean_dxhat_xhat.array()).matrix();
    dx.array().colwise() *= cache.rstd.array();
    return dx;
}

// Standard normal CDF; GELU(x) = x * Phi(x) with the exact erf form.
double gelu_cdf(double x) {
    return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
}

// Sequences of a batch are stacked row-wise so that every position-wise
// product runs as one large matrix multiply; attention stays per sequence.
struct Segment {
    int start;
    int length;
};

struct LayerCache {
    Matrix n1;
    NormCache norm1;
    Matrix q, k, v;
    std::vector<Matrix> attention;  // [segment * n_heads + head], length x length (lower triangular)
    Matrix heads_out;               // rows x d, concatenated head outputs
    Matrix n2;
    NormCache norm2;
    Matrix pre_activation;  // rows x d_ff
    Matrix cdf;             // Phi(pre_activation), reused by the backward pass
    Matrix activation;      // rows x d_ff
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    NormCache final_norm;
};

// Causal multi-head attention on the normalised input `n`.
Matrix attention_block(const LayerParams& lp, const ModelConfig& cfg, const Matrix& n,
                       std::span<const Segment> segments, LayerCache* cache) {
    const int dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix q = n * lp.query;
    Matrix k = n * lp.key;
    Matrix v = n * lp.value;
    Matrix heads(n.rows(), cfg.d_model);
    if (cache) cache->attention.resize(segments.size() * cfg.n_heads);
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const auto [begin, t_len] = segments[s];
        for (int h = 0; h < cfg.n_heads; ++h) {
            Matrix scores = (q.block(begin, h * dh, t_len, dh) * k.block(begin, h * dh, t_len, dh).transpose()) * scale;
            for (int i = 0; i < t_len; ++i) {
                double peak = -std::numeric_limits<double>::infinity();
                for (int j = 0; j <= i; ++j) peak = std::max(peak, scores(i, j));
                double total = 0.0;
                for (int j = 0; j <= i; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - peak);
                    total += scores(i, j);
                }
                for (int j = 0; j <= i; ++j) scores(i, j) /= total;
                for (int j = i + 1; j < t_len; ++j) scores(i, j) = 0.0;
            }
            heads.block(begin, h * dh, t_len, dh) = scores * v.block(begin, h * dh, t_len, dh);
            if (cache) cache->attention[s * cfg.n_heads + h] = std::move(scores);
        }
    }
    Matrix out = heads * lp.output;
    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->heads_out = std::move(heads);
    }
    return out;
}

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) throw Error(ErrorCode::sequence_too_long, "empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw Error(ErrorCode::sequence_too_long,
                    std::to_string(tokens.size()) + " tokens > max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab_size)
            throw Error(ErrorCode::token_out_of_range, "token id " + std::to_string(t));
    }
}

// Runs the blocks and the final norm over stacked sequences. Returns the
// post-norm hidden states (rows x d); optionally records every layer output
// and the backward cache. Injection acts on the last row and is only used
// with a single sequence.
Matrix run_blocks(const Parameters& p, std::span<const int> tokens, std::span<const Segment> segments,
                  const InjectionSpec& injection, std::vector<Matrix>* hidden_by_layer, ForwardCache* cache) {
    const ModelConfig& cfg = p.config;
    const int rows = static_cast<int>(tokens.size());
    const int last = rows - 1;

    Matrix x(rows, cfg.d_model);
    for (const auto& seg : segments)
        for (int t = 0; t < seg.length; ++t)
            x.row(seg.start + t) = p.token_embedding.row(tokens[seg.start + t]) + p.positional_embedding.row(t);
    if (hidden_by_layer) hidden_by_layer->push_back(x);
    if (cache) cache->layers.resize(cfg.n_layers);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = p.layers[l];
        LayerCache* lc = cache ? &cache->layers[l] : nullptr;

        Matrix n1 = layer_norm(x, lp.ln1_gain, lp.ln1_bias, lc ? &lc->norm1 : nullptr);
        x += attention_block(lp, cfg, n1, segments, lc);

        Matrix n2 = layer_norm(x, lp.ln2_gain, lp.ln2_bias, lc ? &lc->norm2 : nullptr);
        Matrix pre = n2 * lp.ff_in;
        Matrix cdf = pre.unaryExpr([](double u) { return gelu_cdf(u); });
        Matrix act = pre.cwiseProduct(cdf);
        x.noalias() += act * lp.ff_out;

        if (lc) {
            lc->n1 = std::move(n1);
            lc->n2 = std::move(n2);
            lc->pre_activation = std::move(pre);
            lc->cdf = std::move(cdf);
            lc->activation = std::move(act);
        }

        const bool is_last_block = l == cfg.n_layers - 1;
        if (!is_last_block) {
            if (injection.mode == InjectionMode::replace_at_layer && injection.layer_index == l)
                x.row(last) = injection.vector.transpose();
            if (hidden_by_layer) hidden_by_layer->push_back(x);
        }
    }

    // The final norm belongs to the last block: its output is the final hidden
    // state, and both kinds of injection act on it directly.
    Matrix h = layer_norm(x, p.final_gain, p.final_bias, cache ? &cache->final_norm : nullptr);
    if (injection.mode == InjectionMode::replace_at_layer && injection.layer_index == cfg.n_layers - 1)
        h.row(last) = injection.vector.transpose();
    if (injection.mode == InjectionMode::add_final) h.row(last) += injection.vector.transpose();
    if (hidden_by_layer) hidden_by_layer->push_back(h);
    return h;
}

void check_injection(const ModelConfig& cfg, const InjectionSpec& injection) {
    if (injection.mode == InjectionMode::none) return;
    if (injection.vector.size() != cfg.d_model)
        throw Error(ErrorCode::injection_dim_mismatch,
                    "vector dim " + std::to_string(injection.vector.size()) + " != d_model " +
                        std::to_string(cfg.d_model));
    if (injection.mode == InjectionMode::replace_at_layer &&
        (injection.layer_index < 0 || injection.layer_index >= cfg.n_layers))
        throw Error(ErrorCode::layer_out_of_range, "replace layer " + std::to_string(injection.layer_index));
}

// Summed cross-entropy over every target of the batch and, when `grad` is
// set, its gradient scaled by `weight` (1 / total targets in the batch).
double batch_objective(const Parameters& p, std::span<const TrainingExample> batch, double weight, Parameters* grad) {
    const ModelConfig& cfg = p.config;
    std::vector<int> tokens;
    std::vector<Segment> segments;
    std::vector<int> target_rows, target_labels;
    for (const auto& ex : batch) {
        check_tokens(cfg, ex.tokens);
        const int start = static_cast<int>(tokens.size());
        const int length = static_cast<int>(ex.tokens.size());
        segments.push_back({start, length});
        tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
        for (const auto& tgt : ex.targets) {
            if (tgt.position < 0 || tgt.position >= length)
                throw Error(ErrorCode::shape_mismatch, "target position out of range");
            if (tgt.label < 0 || tgt.label >= cfg.vocab_size)
                throw Error(ErrorCode::token_out_of_range, "target label " + std::to_string(tgt.label));
            target_rows.push_back(start + tgt.position);
            target_labels.push_back(tgt.label);
        }
    }

    ForwardCache cache;
    const Matrix h = run_blocks(p, tokens, segments, InjectionSpec::none(), nullptr, grad ? &cache : nullptr);

    const int n_targets = static_cast<int>(target_rows.size());
    Matrix h_targets(n_targets, cfg.d_model);
    for (int i = 0; i < n_targets; ++i) h_targets.row(i) = h.row(target_rows[i]);
    Matrix logits = h_targets * p.lm_head.transpose();
    double loss = 0.0;
    for (int i = 0; i < n_targets; ++i) {
        const double peak = logits.row(i).maxCoeff();
        logits.row(i).array() -= peak;
        logits.row(i) = logits.row(i).array().exp().matrix();
        const double total = logits.row(i).sum();
        logits.row(i) /= total;
        loss -= std::log(logits(i, target_labels[i]));
    }
    if (!grad) return loss;

    // logits now holds probabilities; turn them into dL/dlogits.
    for (int i = 0; i < n_targets; ++i) logits(i, target_labels[i]) -= 1.0;
    logits *= weight;
    grad->lm_head.noalias() += logits.transpose() * h_targets;
    const Matrix dh_targets = logits * p.lm_head;
    Matrix dh = Matrix::Zero(h.rows(), h.cols());
    for (int i = 0; i < n_targets; ++i) dh.row(target_rows[i]) += dh_targets.row(i);

    Matrix dx = layer_norm_backward(dh, cache.final_norm, p.final_gain, grad->final_gain, grad->final_bias);

    const int dh_size = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh_size));
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams& lp = p.layers[l];
        LayerParams& gl = grad->layers[l];
        const LayerCache& lc = cache.layers[l];

        // Feed-forward branch.
        gl.ff_out.noalias() += lc.activation.transpose() * dx;
        Matrix dpre = dx * lp.ff_out.transpose();
        dpre.array() *= lc.cdf.array() + lc.pre_activation.array() *
                                             (-0.5 * lc.pre_activation.array().square()).exp() *
                                             (1.0 / std::sqrt(2.0 * std::numbers::pi));
        gl.ff_in.noalias() += lc.n2.transpose() * dpre;
        const Matrix dn2 = dpre * lp.ff_in.transpose();
        dx += layer_norm_backward(dn2, lc.norm2, lp.ln2_gain, gl.ln2_gain, gl.ln2_bias);

        // Attention branch.
        gl.output.noalias() += lc.heads_out.transpose() * dx;
        const Matrix dheads = dx * lp.output.transpose();
        Matrix dq(dx.rows(), cfg.d_model), dk(dx.rows(), cfg.d_model), dv(dx.rows(), cfg.d_model);
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const auto [begin, t_len] = segments[s];
            for (int hd = 0; hd < cfg.n_heads; ++hd) {
                const int col = hd * dh_size;
                const Matrix& a = lc.attention[s * cfg.n_heads + hd];
                const auto dout = dheads.block(begin, col, t_len, dh_size);
                const Matrix da = dout * lc.v.block(begin, col, t_len, dh_size).transpose();
                dv.block(begin, col, t_len, dh_size) = a.transpose() * dout;
                const Vector row_dot = (a.array() * da.array()).rowwise().sum();
                const Matrix ds = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * scale;
                dq.block(begin, col, t_len, dh_size) = ds * lc.k.block(begin, col, t_len, dh_size);
                dk.block(begin, col, t_len, dh_size) = ds.transpose() * lc.q.block(begin, col, t_len, dh_size);
            }
        }
        gl.query.noalias() += lc.n1.transpose() * dq;
        gl.key.noalias() += lc.n1.transpose() * dk;
        gl.value.noalias() += lc.n1.transpose() * dv;
        Matrix dn1 = dq * lp.query.transpose();
        dn1.noalias() += dk * lp.key.transpose();
        dn1.noalias() += dv * lp.value.transpose();
        dx += layer_norm_backward(dn1, lc.norm1, lp.ln1_gain, gl.ln1_gain, gl.ln1_bias);
    }

    for (const auto& seg : segments) {
        for (int t = 0; t < seg.length; ++t) {
            grad->token_embedding.row(tokens[seg.start + t]) += dx.row(seg.start + t);
            grad->positional_embedding.row(t) += dx.row(seg.start + t);
        }
    }
    return loss;
}

std::size_t count_targets(std::span<const TrainingExample> batch) {
    std::size_t n = 0;
    for (const auto& ex : batch) n += ex.targets.size();
    return n;
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::invalid_config, what); };
    if (n_layers < 1) fail("n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_ff < 1) fail("d_model, n_heads and d_ff must be >= 1");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (max_seq_len < 2) fail("max_seq_len must be >= 2");
}

ModelConfig ModelConfig::small() {
    return ModelConfig{2, 64, 4, 256, 64, 128, 1};
}

ModelConfig ModelConfig::large() {
    return ModelConfig{4, 128, 4, 512, 64, 128, 1};
}

Parameters init_parameters(const ModelConfig& config) {
    config.validate();
    const int d = config.d_model;
    Parameters p;
    p.config = config;
    p.token_embedding.resize(config.vocab_size, d);
    p.positional_embedding.resize(config.max_seq_len, d);
    p.layers.resize(config.n_layers);
    for (auto& l : p.layers) {
        l.ln1_gain.resize(1, d);
        l.ln1_bias.resize(1, d);
        l.query.resize(d, d);
        l.key.resize(d, d);
        l.value.resize(d, d);
        l.output.resize(d, d);
        l.ln2_gain.resize(1, d);
        l.ln2_bias.resize(1, d);
        l.ff_in.resize(d, config.d_ff);
        l.ff_out.resize(config.d_ff, d);
    }
    p.final_gain.resize(1, d);
    p.final_bias.resize(1, d);
    p.lm_head.resize(config.vocab_size, d);

    std::mt19937_64 rng(config.rng_seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    Parameters::visit(p, [&](const std::string& name, Matrix& m) {
        if (ends_with(name, ".gain")) {
            m.setOnes();
        } else if (ends_with(name, ".bias")) {
            m.setZero();
        } else {
            // Row-major fill so the draw order does not depend on storage order.
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
        }
    });
    return p;
}

Parameters zeros_like(const Parameters& like) {
    Parameters z = like;
    Parameters::visit(z, [](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

std::uint64_t parameter_count(const Parameters& p) {
    std::uint64_t n = 0;
    Parameters::visit(p, [&](const std::string&, const Matrix& m) { n += static_cast<std::uint64_t>(m.size()); });
    return n;
}

std::uint64_t digest(const Parameters& p) {
    Fnv1a hash;
    const ModelConfig& c = p.config;
    for (long long v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq_len}) hash.integer(v);
    Parameters::visit(p, [&](const std::string&, const Matrix& m) {
        hash.integer(m.rows());
        hash.integer(m.cols());
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index col = 0; col < m.cols(); ++col) hash.real(m(r, col));
    });
    return hash.value();
}

Model::Model(Parameters params) : params_(std::move(params)), digest_(tvlab::digest(params_)) {}

ForwardTrace forward(const Parameters& params, std::span<const int> tokens, const InjectionSpec& injection) {
    check_tokens(params.config, tokens);
    check_injection(params.config, injection);
    ForwardTrace trace;
    trace.seq_len = static_cast<int>(tokens.size());
    trace.hidden_by_layer.reserve(params.config.n_layers + 1);
    const Segment whole{0, trace.seq_len};
    const Matrix h = run_blocks(params, tokens, std::span(&whole, 1), injection, &trace.hidden_by_layer, nullptr);
    trace.logits = h * params.lm_head.transpose();
    return trace;
}

Vector capture_hidden(const Parameters& params, std::span<const int> tokens, int layer) {
    if (layer < 0 || layer > params.config.n_layers)
        throw Error(ErrorCode::layer_out_of_range, "layer " + std::to_string(layer));
    return forward(params, tokens).hidden(layer, static_cast<int>(tokens.size()) - 1);
}

LossAndGradient backward(const Parameters& params, std::span<const TrainingExample> batch) {
    const std::size_t n_targets = count_targets(batch);
    if (batch.empty() || n_targets == 0) throw Error(ErrorCode::empty_batch, "batch has no targets");
    LossAndGradient out{0.0, zeros_like(params)};
    const double weight = 1.0 / static_cast<double>(n_targets);
    out.loss = batch_objective(params, batch, weight, &out.gradient) * weight;
    return out;
}

double batch_loss(const Parameters& params, std::span<const TrainingExample> batch) {
    const std::size_t n_targets = count_targets(batch);
    if (batch.empty() || n_targets == 0) throw Error(ErrorCode::empty_batch, "batch has no targets");
    return batch_objective(params, batch, 0.0, nullptr) / static_cast<double>(n_targets);
}

}  // namespace tvlab
