#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tvlab/method.hpp"
#include "tvlab/model.hpp"
#include "tvlab/tasks.hpp"

namespace tvlab {

/// Zero-shot and ICL quantities for one evaluation query, computed once and
/// shared by every method scored against the same demonstrations.
struct QueryState {
    int query;
    Vector h_zs;
    Vector h_icl;
    ProbabilityVector p_icl;
};

struct EvalContext {
    std::vector<QueryState> states;
    std::vector<int> labels;
    std::uint64_t model_digest = 0;
    std::uint64_t demo_digest = 0;
};

EvalContext prepare_eval(const Model& model, std::span<const Demonstration> demos, std::span<const int> eval_queries,
                         std::span<const int> labels);

struct DntpResult {
    double value = 0.0;  // mean of per_query
    std::vector<double> per_query;
    std::vector<ProbabilityVector> tv;  // P_tv per query
};

/// Empirical mean over the evaluation queries of KL(P_icl || P_tv).
DntpResult d_ntp(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx);
DntpResult d_ntp(const Model& model, const TaskVectorMethod& method, std::span<const Demonstration> demos,
                 std::span<const int> eval_queries, std::span<const int> labels);

/// Mean of ||h_icl - h_zs - v(x)||^2. Throws unsupported_method for methods
/// without an additive final-layer vector.
double l_mse(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx);
double l_mse(const Model& model, const TaskVectorMethod& method, std::span<const Demonstration> demos,
             std::span<const int> eval_queries);

/// d_NTP <= c1 * c2 * sqrt(L_MSE) with c1 the spectral norm of the label
/// rows of the LM head and c2 = 1 + sqrt(K).
struct BoundAudit {
    double d_ntp = 0.0;
    double l_mse = 0.0;
    double c1 = 0.0;
    double c2 = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    bool satisfied = false;
};

BoundAudit audit_bound(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx);
BoundAudit audit_bound(const Model& model, const TaskVectorMethod& method, std::span<const Demonstration> demos,
                       std::span<const int> eval_queries, std::span<const int> labels);

/// The K label rows of the LM head.
Matrix restricted_head(const Model& model, std::span<const int> labels);

double log_softmax_lipschitz(int num_labels);

double accuracy(std::span<const int> predictions, std::span<const int> truths);

struct QueryRecord {
    int query;
    int truth;
    int predicted;
    std::optional<ProbabilityVector> icl;
    std::optional<ProbabilityVector> tv;
    std::optional<double> kl;
};

/// One (method, run) cell of an experiment.
struct EvalReport {
    std::string method;
    std::string task_id;
    std::uint64_t seed = 0;
    int k = 0;
    std::optional<int> num_queries;
    std::optional<double> lambda;
    double accuracy = 0.0;
    std::optional<double> d_ntp;
    std::optional<double> l_mse;
    std::optional<BoundAudit> audit;
    std::optional<double> malformed_rate;
    std::optional<double> extraction_ms;
    std::optional<double> inference_us_per_query;
    std::vector<QueryRecord> records;
};

/// Scores a task-vector method: accuracy against `truths`, d_NTP, and L_MSE
/// plus the bound audit when the method supports them.
EvalReport evaluate_method(const Model& model, const TaskVectorMethod& method, const EvalContext& ctx,
                           std::span<const int> truths);

/// Accuracy-only reports for the plain zero-shot and ICL modes.
EvalReport evaluate_zero_shot(const Model& model, const EvalContext& ctx, std::span<const int> truths);
EvalReport evaluate_icl(const EvalContext& ctx, std::span<const int> truths);

/// Pearson correlation of d_NTP against accuracy across reports.
double correlate(std::span<const EvalReport> reports);

enum class RegressionMode { zero_shot, icl, ltv };

std::string to_string(RegressionMode mode);

struct RegressionResult {
    double mse = 0.0;
    double malformed_rate = 0.0;
    int count = 0;
    int malformed = 0;
};

/// Malformed predictions (nullopt) are scored as y_hat = 0 and counted.
RegressionResult regression_mse(std::span<const std::optional<double>> predictions, std::span<const double> truths);

/// One regression task instance with held-out queries.
struct RegressionCase {
    RegressionTask task;
    std::vector<RegressionPair> demos;
    std::vector<RegressionPair> queries;
};

/// Generates an answer for every held-out query in the chosen mode, decodes
/// it and scores the mean squared error. `methods` holds one LTV method per
/// case for RegressionMode::ltv and is ignored otherwise.
RegressionResult regression_mse(const Model& model, RegressionMode mode, std::span<const RegressionCase> cases,
                                std::span<const TaskVectorMethod> methods, const NumericTokenScheme& scheme,
                                int max_new_tokens);

}  // namespace tvlab
