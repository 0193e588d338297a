#pragma once

// The experiment harness behind the command-line subcommands. Each cmd_*
// reads a Config, writes its outputs into `out_dir` (resolved config,
// results CSV, manifest) and returns the computed rows for callers that
// want to inspect them.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "tvlab/config.hpp"
#include "tvlab/io.hpp"
#include "tvlab/metrics.hpp"

namespace tvlab {

/// Fixed results schema shared by every CSV the harness writes.
const std::vector<std::string>& results_header();

/// One results row. Empty optionals become empty cells.
struct ResultRow {
    int run_id = 0;
    std::uint64_t seed = 0;
    std::string method;
    std::string task_family;
    int k = 0;
    std::optional<int> num_queries;
    std::optional<double> lambda;
    std::optional<double> accuracy;
    std::optional<double> d_ntp;
    std::optional<double> l_mse;
    std::optional<double> c1;
    std::optional<double> c2;
    std::optional<bool> bound_ok;
    std::optional<double> malformed_rate;
    std::optional<double> extraction_ms;
    std::optional<double> inference_us_per_query;
    std::optional<double> mse;

    std::vector<std::string> cells() const;
};

CsvTable results_table(const std::vector<ResultRow>& rows);

using LogFn = std::function<void(const std::string&)>;

/// One held-out classification task with its demonstrations, the N
/// extraction queries and the evaluation queries.
struct TaskInstance {
    ClassificationTask task;
    DemonstrationSet demos;
    std::vector<int> extraction_queries;
    std::vector<int> eval_queries;
    std::vector<int> truths;
    int probe_query = 0;
    std::vector<Demonstration> validation;
};

/// Draws `count` held-out tasks for run `run_id`. Extraction queries cycle
/// through a shuffled copy of the query pool, so every query appears
/// floor(N/|Q|) or ceil(N/|Q|) times; the evaluation set is the whole pool.
std::vector<TaskInstance> sample_task_instances(const TaskConfig& task, int vocab_size,
                                                const std::unordered_set<std::uint64_t>& training_digests,
                                                std::uint64_t seed, int run_id, int count, int shots,
                                                int num_extraction_queries, int validation_size);

/// Scores of one method over a run's tasks, pooled across tasks.
struct MethodScore {
    std::string method;
    double accuracy = 0.0;
    std::optional<double> d_ntp;
    std::optional<double> l_mse;
    std::optional<double> c1;
    std::optional<double> c2;
    std::optional<bool> bound_ok;
    double extraction_ms = 0.0;
    double inference_us_per_query = 0.0;
    std::vector<EvalReport> per_task;
};

struct MethodOptions {
    double lambda = 5.0;
    MlpTrainConfig mlp;
};

/// Extracts and evaluates `method` on every task instance. `method` is one
/// of zero-shot, icl, ltv, constant, layer-replace, mlp.
MethodScore score_method(const Model& model, const std::string& method, const std::vector<TaskInstance>& tasks,
                         const std::vector<EvalContext>& contexts, const MethodOptions& options);

std::vector<EvalContext> prepare_contexts(const Model& model, const std::vector<TaskInstance>& tasks);

/// Held-out ICL and zero-shot accuracy of a classification model.
struct GapReport {
    double icl_accuracy = 0.0;
    double zero_shot_accuracy = 0.0;
    double gap() const { return icl_accuracy - zero_shot_accuracy; }
};

GapReport measure_gap(const Model& model, const std::vector<EvalContext>& contexts,
                      const std::vector<TaskInstance>& tasks);

struct TrainOutcome {
    Model model;
    TrainConfig train;
    std::vector<double> losses;
    std::optional<GapReport> gap;  // classification only
};

TrainOutcome cmd_train(const Config& config, const std::string& out_dir, const LogFn& log = {});
std::vector<ResultRow> cmd_eval(const Config& config, const std::string& out_dir, const LogFn& log = {});

struct CorrelationOutcome {
    std::vector<ResultRow> scatter;
    std::vector<std::pair<std::string, std::optional<double>>> rho;  // nullopt: undefined
};

CorrelationOutcome cmd_correlate(const Config& config, const std::string& out_dir, const LogFn& log = {});
std::vector<ResultRow> cmd_sweep(const Config& config, const std::string& out_dir, const LogFn& log = {});

struct TransferOutcome {
    std::vector<ResultRow> rows;
    /// Per-query labels of small LTV and the transferred map, in task order.
    std::vector<int> small_ltv_predictions;
    std::vector<int> transfer_predictions;
    double max_relative_identity_error = 0.0;  // only meaningful for identical models
};

TransferOutcome cmd_transfer(const Config& config, const std::string& out_dir, const LogFn& log = {});
std::vector<ResultRow> cmd_regress(const Config& config, const std::string& out_dir, const LogFn& log = {});

struct AuditOutcome {
    std::vector<ResultRow> rows;
    int audited = 0;
    int passed = 0;
};

AuditOutcome cmd_audit(const Config& config, const std::string& out_dir, const LogFn& log = {});

}  // namespace tvlab
