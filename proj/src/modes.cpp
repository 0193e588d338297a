#include "tvlab/modes.hpp"

#include <cmath>
#include <limits>

namespace tvlab {

std::string to_string(MethodKind kind) {
    switch (kind) {
        case MethodKind::ltv: return "ltv";
        case MethodKind::constant: return "constant";
        case MethodKind::layer_replace: return "layer-replace";
        case MethodKind::mlp: return "mlp";
        case MethodKind::logit_ltv: return "logit-ltv";
    }
    return "unknown";
}

void TaskVectorMethod::check_model(const Model& model) const {
    if (model.digest() != model_digest)
        throw Error(ErrorCode::wrong_model, "method was extracted for a different model");
}

std::optional<Vector> additive_vector(const TaskVectorMethod& method, const Vector& h_zs) {
    if (const auto* ltv = std::get_if<LtvLinear>(&method.body)) {
        if (ltv->w_star.cols() != h_zs.size()) throw Error(ErrorCode::dimension_mismatch, "W* width");
        return Vector(ltv->w_star * h_zs);
    }
    if (const auto* constant = std::get_if<ConstantMap>(&method.body)) {
        if (constant->c.size() != h_zs.size()) throw Error(ErrorCode::dimension_mismatch, "constant dim");
        return constant->c;
    }
    if (const auto* mlp = std::get_if<MlpMap>(&method.body)) {
        if (mlp->w1.cols() != h_zs.size()) throw Error(ErrorCode::dimension_mismatch, "MLP input dim");
        return Vector(mlp->w2 * (mlp->w1 * h_zs).cwiseMax(0.0));
    }
    return std::nullopt;
}

ProbabilityVector restricted_distribution(const Vector& logits, std::span<const int> labels) {
    if (labels.empty()) throw Error(ErrorCode::empty_label_set, "label set is empty");
    Vector restricted(static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= logits.size())
            throw Error(ErrorCode::token_out_of_range, "label token " + std::to_string(labels[i]));
        restricted[static_cast<Eigen::Index>(i)] = logits[labels[i]];
    }
    return softmax(restricted);
}

int greedy_label(const ProbabilityVector& distribution, std::span<const int> labels) {
    int best = -1;
    double best_p = -1.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double p = distribution[static_cast<Eigen::Index>(i)];
        if (p > best_p || (p == best_p && labels[i] < best)) {
            best_p = p;
            best = labels[i];
        }
    }
    return best;
}

namespace {

Prediction predict_from(const ForwardTrace& trace, std::span<const int> labels) {
    auto dist = restricted_distribution(trace.last_logits(), labels);
    const int label = greedy_label(dist, labels);
    return Prediction{label, std::move(dist), trace.last_hidden()};
}

std::vector<int> zero_shot_prompt(const Model& model, int query) {
    return encode_classification_prompt({}, query, model.config().max_seq_len);
}

int argmax_token(const Vector& logits) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<int>(best);
}

}  // namespace

Prediction zero_shot_predict(const Model& model, int query, std::span<const int> labels) {
    return predict_from(forward(model.params(), zero_shot_prompt(model, query)), labels);
}

Prediction icl_predict(const Model& model, std::span<const Demonstration> demos, int query,
                       std::span<const int> labels) {
    const auto prompt = encode_classification_prompt(demos, query, model.config().max_seq_len);
    return predict_from(forward(model.params(), prompt), labels);
}

Prediction tv_predict(const Model& model, const TaskVectorMethod& method, int query, std::span<const int> labels) {
    method.check_model(model);
    const Parameters& params = model.params();
    const auto prompt = zero_shot_prompt(model, query);

    if (const auto* replace = std::get_if<LayerReplace>(&method.body)) {
        return predict_from(
            forward(params, prompt, InjectionSpec::replace_at_layer(replace->layer - 1, replace->vector)), labels);
    }

    const Vector h_zs = forward(params, prompt).last_hidden();
    if (const auto* logit = std::get_if<LogitLtv>(&method.body)) {
        if (logit->w_tilde.rows() != params.lm_head.rows() || logit->w_tilde.cols() != h_zs.size())
            throw Error(ErrorCode::dimension_mismatch, "W~ shape does not match the model");
        const Vector logits = params.lm_head * h_zs + logit->w_tilde * h_zs;
        auto dist = restricted_distribution(logits, labels);
        const int label = greedy_label(dist, labels);
        return Prediction{label, std::move(dist), h_zs};
    }

    const Vector v = *additive_vector(method, h_zs);
    return predict_from(forward(params, prompt, InjectionSpec::add_final(v)), labels);
}

std::vector<int> greedy_generate(const Model& model, std::span<const int> prompt, int max_new, int stop_token) {
    if (static_cast<long long>(prompt.size()) + max_new > model.config().max_seq_len)
        throw Error(ErrorCode::sequence_too_long, "prompt plus generation exceeds max_seq_len");
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int i = 0; i < max_new; ++i) {
        const int next = argmax_token(forward(model.params(), seq).last_logits());
        out.push_back(next);
        if (next == stop_token) break;
        seq.push_back(next);
    }
    return out;
}

std::vector<int> tv_generate(const Model& model, const TaskVectorMethod& method, std::span<const int> prompt,
                             int max_new, int stop_token) {
    method.check_model(model);
    const auto* ltv = std::get_if<LtvLinear>(&method.body);
    if (!ltv) throw Error(ErrorCode::unsupported_method, "generation needs a linear task vector");
    if (static_cast<long long>(prompt.size()) + max_new > model.config().max_seq_len)
        throw Error(ErrorCode::sequence_too_long, "prompt plus generation exceeds max_seq_len");
    const Parameters& params = model.params();
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (int i = 0; i < max_new; ++i) {
        const Vector h_zs = forward(params, seq).last_hidden();
        const Vector logits = params.lm_head * (h_zs + ltv->w_star * h_zs);
        const int next = argmax_token(logits);
        out.push_back(next);
        if (next == stop_token) break;
        seq.push_back(next);
    }
    return out;
}

}  // namespace tvlab
