#include "tvlab/tvx.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "tvlab/modes.hpp"
#include "tvlab/trainer.hpp"

namespace tvlab {

namespace {

std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

TaskVectorMethod make_method(MethodBody body, const ExtractionBatch& batch) {
    TaskVectorMethod m;
    m.body = std::move(body);
    m.model_digest = batch.model_digest;
    m.demo_digest = batch.demo_digest;
    m.metadata["num_queries"] = std::to_string(batch.queries.size());
    return m;
}

}  // namespace

ExtractionBatch build_extraction_batch(const Model& model, std::span<const Demonstration> demos,
                                       std::span<const int> queries) {
    if (queries.empty()) throw Error(ErrorCode::empty_queries, "no extraction queries");
    const int d = model.config().d_model;
    const int max_len = model.config().max_seq_len;
    ExtractionBatch batch;
    batch.h.resize(d, static_cast<Eigen::Index>(queries.size()));
    batch.y.resize(d, static_cast<Eigen::Index>(queries.size()));
    batch.queries.assign(queries.begin(), queries.end());
    batch.model_digest = model.digest();
    batch.demo_digest = digest(DemonstrationSet(demos.begin(), demos.end()));

    // Forwards are deterministic, so repeated queries reuse their columns.
    std::map<int, std::pair<Vector, Vector>> seen;
    for (std::size_t j = 0; j < queries.size(); ++j) {
        auto it = seen.find(queries[j]);
        if (it == seen.end()) {
            Vector h_zs = forward(model.params(), encode_classification_prompt({}, queries[j], max_len)).last_hidden();
            Vector h_icl =
                forward(model.params(), encode_classification_prompt(demos, queries[j], max_len)).last_hidden();
            Vector shift = h_icl - h_zs;
            it = seen.emplace(queries[j], std::make_pair(std::move(h_zs), std::move(shift))).first;
        }
        batch.h.col(static_cast<Eigen::Index>(j)) = it->second.first;
        batch.y.col(static_cast<Eigen::Index>(j)) = it->second.second;
    }
    return batch;
}

ExtractionBatch build_regression_extraction_batch(const Model& model, std::span<const RegressionPair> demos,
                                                  std::span<const Vector> inputs, const NumericTokenScheme& scheme,
                                                  int reserve_tokens) {
    if (inputs.empty()) throw Error(ErrorCode::empty_queries, "no extraction queries");
    const int d = model.config().d_model;
    const int max_len = model.config().max_seq_len - reserve_tokens;
    ExtractionBatch batch;
    batch.h.resize(d, static_cast<Eigen::Index>(inputs.size()));
    batch.y.resize(d, static_cast<Eigen::Index>(inputs.size()));
    batch.model_digest = model.digest();
    batch.demo_digest = digest(demos);
    for (std::size_t j = 0; j < inputs.size(); ++j) {
        const auto zs = encode_regression_prompt({}, inputs[j], scheme, max_len);
        const auto icl = encode_regression_prompt(demos, inputs[j], scheme, max_len);
        const Vector h_zs = forward(model.params(), zs.tokens).last_hidden();
        batch.h.col(static_cast<Eigen::Index>(j)) = h_zs;
        batch.y.col(static_cast<Eigen::Index>(j)) = forward(model.params(), icl.tokens).last_hidden() - h_zs;
        batch.queries.push_back(static_cast<int>(j));
    }
    return batch;
}

TaskVectorMethod extract_ltv(const ExtractionBatch& batch, double lambda) {
    Matrix w = ridge_solve(batch.h, batch.y, lambda);
    const double residual = ridge_relative_residual(batch.h, batch.y, lambda, w);
    auto m = make_method(LtvLinear{std::move(w), lambda, static_cast<int>(batch.queries.size())}, batch);
    m.metadata["lambda"] = format_real(lambda);
    m.metadata["residual"] = format_real(residual);
    return m;
}

TaskVectorMethod extract_ltv(const Model& model, std::span<const Demonstration> demos,
                             std::span<const int> queries, double lambda) {
    if (!(lambda > 0.0)) throw Error(ErrorCode::non_positive_lambda, "lambda must be > 0");
    return extract_ltv(build_extraction_batch(model, demos, queries), lambda);
}

TaskVectorMethod extract_constant(const ExtractionBatch& batch) {
    if (batch.y.cols() == 0) throw Error(ErrorCode::empty_queries, "no extraction queries");
    return make_method(ConstantMap{batch.y.rowwise().mean()}, batch);
}

TaskVectorMethod extract_constant(const Model& model, std::span<const Demonstration> demos,
                                  std::span<const int> queries) {
    return extract_constant(build_extraction_batch(model, demos, queries));
}

TaskVectorMethod extract_layer_replace(const Model& model, std::span<const Demonstration> demos, int probe_query,
                                       std::span<const Demonstration> validation, std::span<const int> labels) {
    if (validation.empty()) throw Error(ErrorCode::empty_validation, "no validation pairs");
    const auto& cfg = model.config();
    const auto trace = forward(model.params(), encode_classification_prompt(demos, probe_query, cfg.max_seq_len));
    const int last = trace.seq_len - 1;

    LayerReplace best;
    double best_accuracy = -1.0;
    for (int layer = 1; layer <= cfg.n_layers; ++layer) {
        const Vector captured = trace.hidden(layer, last);
        const auto injection = InjectionSpec::replace_at_layer(layer - 1, captured);
        int correct = 0;
        for (const auto& pair : validation) {
            const auto t = forward(model.params(), encode_classification_prompt({}, pair.query, cfg.max_seq_len),
                                   injection);
            const auto dist = restricted_distribution(t.last_logits(), labels);
            correct += greedy_label(dist, labels) == pair.label ? 1 : 0;
        }
        const double accuracy = static_cast<double>(correct) / static_cast<double>(validation.size());
        best.layer_accuracy.push_back(accuracy);
        if (accuracy > best_accuracy) {
            best_accuracy = accuracy;
            best.layer = layer;
            best.vector = captured;
        }
    }

    TaskVectorMethod m;
    m.model_digest = model.digest();
    m.demo_digest = digest(DemonstrationSet(demos.begin(), demos.end()));
    m.metadata["probe_query"] = std::to_string(probe_query);
    m.metadata["validation_size"] = std::to_string(validation.size());
    m.metadata["validation_accuracy"] = format_real(best_accuracy);
    m.body = std::move(best);
    return m;
}

MlpMap init_mlp_map(int d, int width, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> in_dist(0.0, std::sqrt(2.0 / d));
    std::normal_distribution<double> out_dist(0.0, std::sqrt(1.0 / width));
    MlpMap map{Matrix(width, d), Matrix(d, width)};
    for (int r = 0; r < width; ++r)
        for (int c = 0; c < d; ++c) map.w1(r, c) = in_dist(rng);
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < width; ++c) map.w2(r, c) = out_dist(rng);
    return map;
}

double mlp_map_loss(const MlpMap& map, const Matrix& h, const Matrix& y) {
    const Matrix out = map.w2 * (map.w1 * h).cwiseMax(0.0);
    return (y - out).colwise().squaredNorm().mean();
}

MlpGradient mlp_map_gradient(const MlpMap& map, const Matrix& h, const Matrix& y) {
    const double n = static_cast<double>(h.cols());
    const Matrix pre = map.w1 * h;
    const Matrix act = pre.cwiseMax(0.0);
    const Matrix residual = map.w2 * act - y;
    const Matrix dout = (2.0 / n) * residual;
    MlpGradient g;
    g.loss = residual.colwise().squaredNorm().mean();
    g.w2 = dout * act.transpose();
    Matrix dpre = map.w2.transpose() * dout;
    dpre.array() *= (pre.array() > 0.0).cast<double>();
    g.w1 = dpre * h.transpose();
    return g;
}

TaskVectorMethod train_mlp_map(const ExtractionBatch& batch, const MlpTrainConfig& config) {
    if (config.epochs < 1) throw Error(ErrorCode::invalid_config, "MLP epochs must be >= 1");
    if (config.batch_size < 1) throw Error(ErrorCode::invalid_config, "MLP batch size must be >= 1");
    const int d = static_cast<int>(batch.h.rows());
    const int width = config.width > 0 ? config.width : d;
    const int n = static_cast<int>(batch.h.cols());
    if (n == 0) throw Error(ErrorCode::empty_queries, "no extraction queries");

    MlpMap map = init_mlp_map(d, width, config.seed);
    Matrix m1 = Matrix::Zero(width, d), v1 = Matrix::Zero(width, d);
    Matrix m2 = Matrix::Zero(d, width), v2 = Matrix::Zero(d, width);
    const int batches_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const int total_steps = config.epochs * batches_per_epoch;

    Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    int step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (int start = 0; start < n; start += config.batch_size, ++step) {
            const int count = std::min(config.batch_size, n - start);
            Matrix hb(d, count), yb(d, count);
            for (int j = 0; j < count; ++j) {
                hb.col(j) = batch.h.col(order[start + j]);
                yb.col(j) = batch.y.col(order[start + j]);
            }
            const auto g = mlp_map_gradient(map, hb, yb);
            const double lr = warmup_cosine_rate(config.learning_rate, config.warmup_fraction, total_steps, step);
            const double t = static_cast<double>(step + 1);
            const double c1 = 1.0 - std::pow(config.beta1, t);
            const double c2 = 1.0 - std::pow(config.beta2, t);
            auto update = [&](Matrix& w, Matrix& m, Matrix& v, const Matrix& grad) {
                m = config.beta1 * m + (1.0 - config.beta1) * grad;
                v = config.beta2 * v + (1.0 - config.beta2) * grad.cwiseProduct(grad);
                if (lr == 0.0) return;
                w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.epsilon);
            };
            update(map.w1, m1, v1, g.w1);
            update(map.w2, m2, v2, g.w2);
        }
    }

    const double final_loss = mlp_map_loss(map, batch.h, batch.y);
    auto method = make_method(std::move(map), batch);
    method.metadata["final_loss"] = format_real(final_loss);
    method.metadata["epochs"] = std::to_string(config.epochs);
    method.metadata["mlp_seed"] = std::to_string(config.seed);
    return method;
}

TaskVectorMethod extract_logit_ltv(const Model& large, const Model& small, std::span<const Demonstration> demos,
                                   std::span<const int> queries, double lambda) {
    if (large.config().vocab_size != small.config().vocab_size)
        throw Error(ErrorCode::vocab_mismatch, "models do not share a vocabulary");
    if (demos.empty()) throw Error(ErrorCode::too_few_shots, "logit-space transfer needs demonstrations");
    if (queries.empty()) throw Error(ErrorCode::empty_queries, "no extraction queries");
    if (!(lambda > 0.0)) throw Error(ErrorCode::non_positive_lambda, "lambda must be > 0");

    const int vocab = small.config().vocab_size;
    Matrix h(small.config().d_model, static_cast<Eigen::Index>(queries.size()));
    Matrix target(vocab, static_cast<Eigen::Index>(queries.size()));
    std::map<int, std::pair<Vector, Vector>> seen;
    for (std::size_t j = 0; j < queries.size(); ++j) {
        auto it = seen.find(queries[j]);
        if (it == seen.end()) {
            const auto zs_prompt = encode_classification_prompt({}, queries[j], small.config().max_seq_len);
            const auto icl_prompt = encode_classification_prompt(demos, queries[j], large.config().max_seq_len);
            Vector h_zs = forward(small.params(), zs_prompt).last_hidden();
            const Vector h_icl_large = forward(large.params(), icl_prompt).last_hidden();
            Vector diff = large.params().lm_head * h_icl_large - small.params().lm_head * h_zs;
            it = seen.emplace(queries[j], std::make_pair(std::move(h_zs), std::move(diff))).first;
        }
        h.col(static_cast<Eigen::Index>(j)) = it->second.first;
        target.col(static_cast<Eigen::Index>(j)) = it->second.second;
    }

    Matrix w = ridge_solve(h, target, lambda);
    const double residual = ridge_relative_residual(h, target, lambda, w);
    TaskVectorMethod m;
    m.body = LogitLtv{std::move(w), lambda, static_cast<int>(queries.size())};
    m.model_digest = small.digest();
    m.demo_digest = digest(DemonstrationSet(demos.begin(), demos.end()));
    m.metadata["source_model_digest"] = std::to_string(large.digest());
    m.metadata["lambda"] = format_real(lambda);
    m.metadata["residual"] = format_real(residual);
    m.metadata["num_queries"] = std::to_string(queries.size());
    return m;
}

}  // namespace tvlab
