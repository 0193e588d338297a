#include "tvlab/metrics.hpp"

#include <cmath>

#include "tvlab/modes.hpp"

namespace tvlab {

EvalContext prepare_eval(const Model& model, std::span<const Demonstration> demos, std::span<const int> eval_queries,
                         std::span<const int> labels) {
    if (eval_queries.empty()) throw Error(ErrorCode::empty_queries, "no evaluation queries");
    if (labels.empty()) throw Error(ErrorCode::empty_label_set, "label set is empty");
    EvalContext ctx;
    ctx.labels.assign(labels.begin(), labels.end());
    ctx.model_digest = model.digest();
    ctx.demo_digest = digest(DemonstrationSet(demos.begin(), demos.end()));
    const int max_len = model.config().max_seq_len;
    for (int q : eval_queries) {
        Vector h_zs = forward(model.params(), encode_classification_prompt({}, q, max_len)).last_hidden();
        const auto icl = forward(model.params(), encode_classification_prompt(demos, q, max_len));
        ctx.states.push_back(
            QueryState{q, std::move(h_zs), icl.last_hidden(), restricted_distribution(icl.last_logits(), labels)});
    }
    return ctx;
}

namespace {

void check_context(const Model& model, const EvalContext& ctx) {
    if (ctx.model_digest != model.digest())
        throw Error(ErrorCode::wrong_model, "evaluation context was prepared for a different model");
    if (ctx.states.empty()) throw Error(ErrorCode::empty_queries, "no evaluation queries");
}

}  // namespace

DntpResult d_ntp(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx) {
    check_context(model, ctx);
    DntpResult out;
    double total = 0.0;
    for (const auto& s : ctx.states) {
        auto tv = tv_predict(model, method, s.query, ctx.labels).distribution;
        const double kl = kl_divergence(s.p_icl, tv);
        out.per_query.push_back(kl);
        out.tv.push_back(std::move(tv));
        total += kl;
    }
    out.value = total / static_cast<double>(ctx.states.size());
    return out;
}

DntpResult d_ntp(const Model& model, const TaskVectorMethod& method, std::span<const Demonstration> demos,
                 std::span<const int> eval_queries, std::span<const int> labels) {
    return d_ntp(model, method, prepare_eval(model, demos, eval_queries, labels));
}

double l_mse(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx) {
    check_context(model, ctx);
    method.check_model(model);
    double total = 0.0;
    for (const auto& s : ctx.states) {
        const auto v = additive_vector(method, s.h_zs);
        if (!v)
            throw Error(ErrorCode::unsupported_method,
                        to_string(method.kind()) + " has no additive final-layer vector");
        total += (s.h_icl - s.h_zs - *v).squaredNorm();
    }
    return total / static_cast<double>(ctx.states.size());
}

double l_mse(const Model& model, const TaskVectorMethod& method, std::span<const Demonstration> demos,
             std::span<const int> eval_queries) {
    if (eval_queries.empty()) throw Error(ErrorCode::empty_queries, "no evaluation queries");
    // Labels do not enter L_MSE; any valid token set will do.
    const int any_label[] = {kBosToken};
    return l_mse(model, method, prepare_eval(model, demos, eval_queries, any_label));
}

Matrix restricted_head(const Model& model, std::span<const int> labels) {
    const Matrix& head = model.params().lm_head;
    Matrix rows(static_cast<Eigen::Index>(labels.size()), head.cols());
    for (std::size_t i = 0; i < labels.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = head.row(labels[i]);
    return rows;
}

double log_softmax_lipschitz(int num_labels) {
    return 1.0 + std::sqrt(static_cast<double>(num_labels));
}

BoundAudit audit_bound(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx) {
    BoundAudit a;
    a.l_mse = l_mse(model, method, ctx);
    a.d_ntp = d_ntp(model, method, ctx).value;
    a.c1 = spectral_norm(restricted_head(model, ctx.labels));
    a.c2 = log_softmax_lipschitz(static_cast<int>(ctx.labels.size()));
    a.lhs = a.d_ntp;
    a.rhs = a.c1 * a.c2 * std::sqrt(a.l_mse);
    a.satisfied = a.lhs <= a.rhs + 1e-9;
    return a;
}

BoundAudit audit_bound(const Model& model, const TaskVectorMethod& method, std::span<const Demonstration> demos,
                       std::span<const int> eval_queries, std::span<const int> labels) {
    return audit_bound(model, method, prepare_eval(model, demos, eval_queries, labels));
}

double accuracy(std::span<const int> predictions, std::span<const int> truths) {
    if (predictions.size() != truths.size())
        throw Error(ErrorCode::length_mismatch, "predictions and truths differ in length");
    if (predictions.empty()) throw Error(ErrorCode::length_mismatch, "no predictions");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == truths[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

EvalReport evaluate_method(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx,
                           std::span<const int> truths) {
    if (truths.size() != ctx.states.size())
        throw Error(ErrorCode::length_mismatch, "one truth label per evaluation query is required");
    EvalReport report;
    report.method = to_string(method.kind());
    const auto dn = d_ntp(model, method, ctx);
    std::vector<int> predictions;
    for (std::size_t i = 0; i < ctx.states.size(); ++i) {
        const int predicted = greedy_label(dn.tv[i], ctx.labels);
        predictions.push_back(predicted);
        report.records.push_back(
            QueryRecord{ctx.states[i].query, truths[i], predicted, ctx.states[i].p_icl, dn.tv[i], dn.per_query[i]});
    }
    report.accuracy = accuracy(predictions, truths);
    report.d_ntp = dn.value;
    if (additive_vector(method, ctx.states.front().h_zs)) {
        BoundAudit a;
        a.d_ntp = dn.value;
        a.l_mse = l_mse(model, method, ctx);
        a.c1 = spectral_norm(restricted_head(model, ctx.labels));
        a.c2 = log_softmax_lipschitz(static_cast<int>(ctx.labels.size()));
        a.lhs = a.d_ntp;
        a.rhs = a.c1 * a.c2 * std::sqrt(a.l_mse);
        a.satisfied = a.lhs <= a.rhs + 1e-9;
        report.l_mse = a.l_mse;
        report.audit = a;
    }
    return report;
}

EvalReport evaluate_zero_shot(const Model& model, const EvalContext& ctx, std::span<const int> truths) {
    check_context(model, ctx);
    if (truths.size() != ctx.states.size())
        throw Error(ErrorCode::length_mismatch, "one truth label per evaluation query is required");
    EvalReport report;
    report.method = "zero-shot";
    std::vector<int> predictions;
    for (std::size_t i = 0; i < ctx.states.size(); ++i) {
        const Vector logits = model.params().lm_head * ctx.states[i].h_zs;
        const auto dist = restricted_distribution(logits, ctx.labels);
        predictions.push_back(greedy_label(dist, ctx.labels));
        report.records.push_back(QueryRecord{ctx.states[i].query, truths[i], predictions.back(), {}, {}, {}});
    }
    report.accuracy = accuracy(predictions, truths);
    return report;
}

EvalReport evaluate_icl(const EvalContext& ctx, std::span<const int> truths) {
    if (truths.size() != ctx.states.size())
        throw Error(ErrorCode::length_mismatch, "one truth label per evaluation query is required");
    EvalReport report;
    report.method = "icl";
    std::vector<int> predictions;
    for (std::size_t i = 0; i < ctx.states.size(); ++i) {
        predictions.push_back(greedy_label(ctx.states[i].p_icl, ctx.labels));
        report.records.push_back(
            QueryRecord{ctx.states[i].query, truths[i], predictions.back(), ctx.states[i].p_icl, {}, {}});
    }
    report.accuracy = accuracy(predictions, truths);
    return report;
}

double correlate(std::span<const EvalReport> reports) {
    std::vector<double> d, acc;
    for (const auto& r : reports) {
        if (!r.d_ntp) throw Error(ErrorCode::degenerate_input, "report without d_NTP");
        d.push_back(*r.d_ntp);
        acc.push_back(r.accuracy);
    }
    return pearson(d, acc);
}

std::string to_string(RegressionMode mode) {
    switch (mode) {
        case RegressionMode::zero_shot: return "zero-shot";
        case RegressionMode::icl: return "icl";
        case RegressionMode::ltv: return "ltv";
    }
    return "unknown";
}

RegressionResult regression_mse(std::span<const std::optional<double>> predictions, std::span<const double> truths) {
    if (predictions.size() != truths.size())
        throw Error(ErrorCode::length_mismatch, "predictions and truths differ in length");
    if (predictions.empty()) throw Error(ErrorCode::length_mismatch, "no predictions");
    RegressionResult r;
    double total = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const double y_hat = predictions[i].value_or(0.0);
        if (!predictions[i]) ++r.malformed;
        total += (y_hat - truths[i]) * (y_hat - truths[i]);
    }
    r.count = static_cast<int>(predictions.size());
    r.mse = total / r.count;
    r.malformed_rate = static_cast<double>(r.malformed) / r.count;
    return r;
}

RegressionResult regression_mse(const Model& model, RegressionMode mode, std::span<const RegressionCase> cases,
                                std::span<const TaskVectorMethod> methods, const NumericTokenScheme& scheme,
                                int max_new_tokens) {
    if (mode == RegressionMode::ltv && methods.size() != cases.size())
        throw Error(ErrorCode::length_mismatch, "one LTV method per regression case is required");
    const int max_len = model.config().max_seq_len;
    std::vector<std::optional<double>> predictions;
    std::vector<double> truths;
    for (std::size_t c = 0; c < cases.size(); ++c) {
        const auto& rc = cases[c];
        for (const auto& q : rc.queries) {
            const std::span<const RegressionPair> demos =
                mode == RegressionMode::icl ? std::span<const RegressionPair>(rc.demos) : std::span<const RegressionPair>{};
            const auto prompt = encode_regression_prompt(demos, q.x, scheme, max_len - max_new_tokens);
            const auto generated = mode == RegressionMode::ltv
                                       ? tv_generate(model, methods[c], prompt.tokens, max_new_tokens, scheme.newline)
                                       : greedy_generate(model, prompt.tokens, max_new_tokens, scheme.newline);
            try {
                predictions.emplace_back(decode_number(generated, scheme));
            } catch (const Error& e) {
                if (e.code() != ErrorCode::malformed_number) throw;
                predictions.emplace_back(std::nullopt);
            }
            truths.push_back(q.y);
        }
    }
    return regression_mse(predictions, truths);
}

}  // namespace tvlab
