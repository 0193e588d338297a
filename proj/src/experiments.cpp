#include "tvlab/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>

#include <json.hpp>

#include "tvlab/error.hpp"
#include "tvlab/modes.hpp"
#include "tvlab/trainer.hpp"
#include "tvlab/tvx.hpp"

namespace tvlab {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string cell(const std::optional<double>& v) {
    return v ? format_real(*v) : "";
}

std::string cell(const std::optional<int>& v) {
    return v ? std::to_string(*v) : "";
}

Rng run_rng(std::uint64_t seed, int stream, int index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index)};
    return Rng(seq);
}

// Distinct RNG streams so that, e.g., the sweep and eval draw the same tasks
// for the same run index while MLP initialisation stays independent.
enum Stream : int { tasks_stream = 1, mlp_stream = 2, regression_stream = 3, audit_stream = 4 };

// Output bookkeeping shared by every subcommand.
class OutputDir {
public:
    OutputDir(std::string dir, std::string command, const Config& config)
        : dir_(std::move(dir)), command_(std::move(command)), started_(Clock::now()), config_(config) {
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec) throw Error(ErrorCode::io_error, "cannot create " + dir_ + ": " + ec.message());
        manifest_["command"] = command_;
        manifest_["seed"] = config.get_u64("seed");
        manifest_["files"] = nlohmann::json::array();
        manifest_["digests"] = nlohmann::json::object();
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        manifest_["started_utc"] = stamp;
    }

    std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

    void write(const std::string& name, const std::string& contents) {
        write_file_atomic(path(name), contents);
        manifest_["files"].push_back(name);
    }

    void record_file(const std::string& name) { manifest_["files"].push_back(name); }

    void digest(const std::string& name, std::uint64_t value) { manifest_["digests"][name] = std::to_string(value); }

    void note(const std::string& key, nlohmann::json value) { manifest_[key] = std::move(value); }

    void finish() {
        write("config.txt", config_.resolved());
        manifest_["wall_clock_seconds"] = elapsed_ms(started_) / 1000.0;
        write_file_atomic(path("manifest.json"), manifest_.dump(2) + "\n");
    }

private:
    std::string dir_;
    std::string command_;
    Clock::time_point started_;
    const Config& config_;
    nlohmann::json manifest_;
};

void say(const LogFn& log, const std::string& line) {
    if (log) log(line);
}

struct LoadedModel {
    ModelCheckpoint checkpoint;
    std::unordered_set<std::uint64_t> training_digests;
};

LoadedModel load_for_eval(const std::string& path, bool need_classification) {
    LoadedModel out{load_model(path), {}};
    const auto family = out.checkpoint.train.task.family;
    if (need_classification && family != TaskFamily::classification)
        throw Error(ErrorCode::config_error, "checkpoint " + path + " was trained on " + to_string(family) +
                                                 ", a classification model is required");
    if (!need_classification && !is_regression(family))
        throw Error(ErrorCode::config_error, "checkpoint " + path + " is not a regression model");
    out.training_digests = replay_training_tasks(out.checkpoint.model.config(), out.checkpoint.train);
    return out;
}

MethodOptions method_options(const Config& config) {
    MethodOptions o;
    o.lambda = config.get_real("ltv.lambda");
    o.mlp = mlp_config_from(config);
    return o;
}

ResultRow row_from_score(int run_id, std::uint64_t seed, const std::string& family, int k, const MethodScore& s,
                         const std::optional<int>& n, const std::optional<double>& lambda, bool timing) {
    ResultRow r;
    r.run_id = run_id;
    r.seed = seed;
    r.method = s.method;
    r.task_family = family;
    r.k = k;
    const bool extracted = s.method != "zero-shot" && s.method != "icl";
    if (extracted && s.method != "layer-replace") r.num_queries = n;
    if (s.method == "ltv") r.lambda = lambda;
    r.accuracy = s.accuracy;
    r.d_ntp = s.d_ntp;
    r.l_mse = s.l_mse;
    r.c1 = s.c1;
    r.c2 = s.c2;
    r.bound_ok = s.bound_ok;
    if (timing) {
        if (extracted) r.extraction_ms = s.extraction_ms;
        r.inference_us_per_query = s.inference_us_per_query;
    }
    return r;
}

int demo_count(const TaskConfig& task, int shots) {
    return (shots / task.num_labels) * task.num_labels;
}

}  // namespace

const std::vector<std::string>& results_header() {
    static const std::vector<std::string> header = {
        "run_id", "seed",     "method", "task_family", "k",        "N",
        "lambda", "accuracy", "d_ntp",  "l_mse",       "c1",       "c2",
        "bound_ok", "malformed_rate", "extraction_ms", "inference_us_per_query", "mse"};
    return header;
}

std::vector<std::string> ResultRow::cells() const {
    return {std::to_string(run_id),
            std::to_string(seed),
            method,
            task_family,
            std::to_string(k),
            cell(num_queries),
            cell(lambda),
            cell(accuracy),
            cell(d_ntp),
            cell(l_mse),
            cell(c1),
            cell(c2),
            bound_ok ? (*bound_ok ? "true" : "false") : "",
            cell(malformed_rate),
            cell(extraction_ms),
            cell(inference_us_per_query),
            cell(mse)};
}

CsvTable results_table(const std::vector<ResultRow>& rows) {
    CsvTable table(results_header());
    for (const auto& r : rows) table.add_row(r.cells());
    return table;
}

std::vector<TaskInstance> sample_task_instances(const TaskConfig& task, int vocab_size,
                                                const std::unordered_set<std::uint64_t>& training_digests,
                                                std::uint64_t seed, int run_id, int count, int shots,
                                                int num_extraction_queries, int validation_size) {
    if (count < 1) throw Error(ErrorCode::config_error, "at least one task per run is required");
    if (num_extraction_queries < 1) throw Error(ErrorCode::config_error, "ltv.num_queries must be >= 1");
    Rng rng = run_rng(seed, tasks_stream, run_id);
    std::vector<TaskInstance> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) {
        TaskInstance inst;
        inst.task = sample_heldout_task(rng, task, vocab_size, training_digests);
        inst.demos = sample_demonstrations(inst.task, shots, rng);
        std::vector<int> pool = inst.task.queries;
        std::shuffle(pool.begin(), pool.end(), rng);
        for (int j = 0; j < num_extraction_queries; ++j)
            inst.extraction_queries.push_back(pool[static_cast<std::size_t>(j) % pool.size()]);
        inst.eval_queries = inst.task.queries;
        for (int q : inst.eval_queries) inst.truths.push_back(inst.task.label_of(q));
        std::uniform_int_distribution<std::size_t> pick(0, inst.task.queries.size() - 1);
        inst.probe_query = inst.task.queries[pick(rng)];
        for (int v = 0; v < validation_size; ++v) {
            const int q = inst.task.queries[pick(rng)];
            inst.validation.push_back({q, inst.task.label_of(q)});
        }
        out.push_back(std::move(inst));
    }
    return out;
}

std::vector<EvalContext> prepare_contexts(const Model& model, const std::vector<TaskInstance>& tasks) {
    std::vector<EvalContext> out;
    out.reserve(tasks.size());
    for (const auto& t : tasks) out.push_back(prepare_eval(model, t.demos, t.eval_queries, t.task.labels));
    return out;
}

MethodScore score_method(const Model& model, const std::string& method, const std::vector<TaskInstance>& tasks,
                         const std::vector<EvalContext>& contexts, const MethodOptions& options) {
    if (tasks.size() != contexts.size()) throw Error(ErrorCode::length_mismatch, "one context per task is required");
    MethodScore score;
    score.method = method;
    double extraction_ms = 0.0;
    double inference_ms = 0.0;
    std::size_t queries = 0;
    bool all_ok = true;
    bool has_audit = false;
    double d_sum = 0.0, l_sum = 0.0, c1 = 0.0, c2 = 0.0;

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const auto& t = tasks[i];
        const auto& ctx = contexts[i];
        EvalReport report;
        if (method == "zero-shot") {
            const auto start = Clock::now();
            report = evaluate_zero_shot(model, ctx, t.truths);
            inference_ms += elapsed_ms(start);
        } else if (method == "icl") {
            const auto start = Clock::now();
            report = evaluate_icl(ctx, t.truths);
            inference_ms += elapsed_ms(start);
        } else {
            const auto start = Clock::now();
            TaskVectorMethod m;
            if (method == "ltv") {
                m = extract_ltv(build_extraction_batch(model, t.demos, t.extraction_queries), options.lambda);
            } else if (method == "constant") {
                m = extract_constant(build_extraction_batch(model, t.demos, t.extraction_queries));
            } else if (method == "mlp") {
                MlpTrainConfig mlp = options.mlp;
                mlp.seed = options.mlp.seed * 1000003ULL + i;
                m = train_mlp_map(build_extraction_batch(model, t.demos, t.extraction_queries), mlp);
            } else if (method == "layer-replace") {
                m = extract_layer_replace(model, t.demos, t.probe_query, t.validation, t.task.labels);
            } else {
                throw Error(ErrorCode::config_error, "unknown method '" + method + "'");
            }
            extraction_ms += elapsed_ms(start);
            const auto infer = Clock::now();
            report = evaluate_method(model, m, ctx, t.truths);
            inference_ms += elapsed_ms(infer);
            d_sum += *report.d_ntp;
            if (report.audit) {
                has_audit = true;
                l_sum += report.audit->l_mse;
                c1 = std::max(c1, report.audit->c1);
                c2 = std::max(c2, report.audit->c2);
                all_ok = all_ok && report.audit->satisfied;
            }
        }
        report.method = method;
        report.task_id = std::to_string(t.task.digest());
        score.accuracy += report.accuracy;
        queries += t.eval_queries.size();
        score.per_task.push_back(std::move(report));
    }
    const double n = static_cast<double>(tasks.size());
    score.accuracy /= n;
    if (method != "zero-shot" && method != "icl") score.d_ntp = d_sum / n;
    if (has_audit) {
        score.l_mse = l_sum / n;
        score.c1 = c1;
        score.c2 = c2;
        score.bound_ok = all_ok;
    }
    score.extraction_ms = extraction_ms / n;
    score.inference_us_per_query = queries ? 1000.0 * inference_ms / static_cast<double>(queries) : 0.0;
    return score;
}

GapReport measure_gap(const Model& model, const std::vector<EvalContext>& contexts,
                      const std::vector<TaskInstance>& tasks) {
    GapReport gap;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        gap.icl_accuracy += evaluate_icl(contexts[i], tasks[i].truths).accuracy;
        gap.zero_shot_accuracy += evaluate_zero_shot(model, contexts[i], tasks[i].truths).accuracy;
    }
    gap.icl_accuracy /= static_cast<double>(tasks.size());
    gap.zero_shot_accuracy /= static_cast<double>(tasks.size());
    return gap;
}

TrainOutcome cmd_train(const Config& config, const std::string& out_dir, const LogFn& log) {
    const ModelConfig mc = model_config_from(config);
    const TrainConfig tc = train_config_from(config);
    OutputDir out(out_dir, "train", config);

    const int report_every = std::max(1, tc.steps / 20);
    const auto start = Clock::now();
    TrainResult result = train_on_stream(mc, tc, [&](int step, double loss) {
        if (step % report_every == 0 || step + 1 == tc.steps) {
            char line[128];
            std::snprintf(line, sizeof line, "step %d/%d loss %.4f (%.0f s)", step + 1, tc.steps, loss,
                          elapsed_ms(start) / 1000.0);
            say(log, line);
        }
    });

    TrainOutcome outcome{Model(std::move(result.params)), tc, std::move(result.losses), std::nullopt};
    save_model(out.path("model.tvfg"), outcome.model, tc);
    out.record_file("model.tvfg");
    out.digest("model", outcome.model.digest());

    CsvTable losses({"step", "loss"});
    for (std::size_t i = 0; i < outcome.losses.size(); ++i)
        losses.add_row({std::to_string(i), format_real(outcome.losses[i])});
    out.write("loss.csv", losses.render());

    if (tc.task.family == TaskFamily::classification) {
        const int count = static_cast<int>(config.get_int("eval.tasks_per_run"));
        const auto tasks = sample_task_instances(tc.task, mc.vocab_size, result.task_digests, config.get_u64("seed"),
                                                 0, count, tc.task.shots, tc.task.num_queries, 1);
        const auto contexts = prepare_contexts(outcome.model, tasks);
        outcome.gap = measure_gap(outcome.model, contexts, tasks);
        char line[160];
        std::snprintf(line, sizeof line, "held-out ICL accuracy %.4f, zero-shot accuracy %.4f, gap %.4f",
                      outcome.gap->icl_accuracy, outcome.gap->zero_shot_accuracy, outcome.gap->gap());
        say(log, line);
        out.note("icl_accuracy", outcome.gap->icl_accuracy);
        out.note("zero_shot_accuracy", outcome.gap->zero_shot_accuracy);
    }
    out.note("model_seed", mc.rng_seed);
    out.note("train_seed", tc.rng_seed);
    out.finish();
    return outcome;
}

std::vector<ResultRow> cmd_eval(const Config& config, const std::string& out_dir, const LogFn& log) {
    const auto loaded = load_for_eval(config.get("checkpoint"), true);
    const Model& model = loaded.checkpoint.model;
    const TaskConfig& task = loaded.checkpoint.train.task;
    const auto methods = config.get_list("eval.methods");
    const int runs = static_cast<int>(config.get_int("eval.runs"));
    const int per_run = static_cast<int>(config.get_int("eval.tasks_per_run"));
    const int n = static_cast<int>(config.get_int("ltv.num_queries"));
    const std::uint64_t seed = config.get_u64("seed");
    const bool timing = config.get_bool("eval.record_timing");
    const auto options = method_options(config);
    if (runs < 1) throw Error(ErrorCode::config_error, "eval.runs must be >= 1");

    OutputDir out(out_dir, "eval", config);
    out.digest("model", model.digest());
    std::vector<ResultRow> rows;
    for (int run = 0; run < runs; ++run) {
        const auto tasks = sample_task_instances(task, model.config().vocab_size, loaded.training_digests, seed, run,
                                                 per_run, task.shots, n,
                                                 static_cast<int>(config.get_int("layer_replace.validation_size")));
        const auto contexts = prepare_contexts(model, tasks);
        for (const auto& method : methods) {
            const auto score = score_method(model, method, tasks, contexts, options);
            rows.push_back(row_from_score(run, seed, to_string(task.family), demo_count(task, task.shots), score, n,
                                          options.lambda, timing));
            say(log, "run " + std::to_string(run) + " " + method + " accuracy " + format_real(score.accuracy));
        }
    }
    out.write("results.csv", results_table(rows).render());
    out.finish();
    return rows;
}

CorrelationOutcome cmd_correlate(const Config& config, const std::string& out_dir, const LogFn& log) {
    const auto loaded = load_for_eval(config.get("checkpoint"), true);
    const Model& model = loaded.checkpoint.model;
    const TaskConfig& task = loaded.checkpoint.train.task;
    const auto methods = config.get_list("correlate.methods");
    const int runs = static_cast<int>(config.get_int("correlate.runs"));
    const int per_run = static_cast<int>(config.get_int("correlate.tasks_per_run"));
    const int n = static_cast<int>(config.get_int("ltv.num_queries"));
    const std::uint64_t seed = config.get_u64("seed");
    const bool timing = config.get_bool("eval.record_timing");
    const auto options = method_options(config);
    for (const auto& m : methods)
        if (m == "zero-shot" || m == "icl")
            throw Error(ErrorCode::config_error, "correlate.methods needs extracted methods, got '" + m + "'");
    if (runs < 3) throw Error(ErrorCode::config_error, "correlate.runs must be >= 3");

    OutputDir out(out_dir, "correlate", config);
    out.digest("model", model.digest());
    CorrelationOutcome outcome;
    std::map<std::string, std::vector<EvalReport>> pooled;
    GapReport gap;
    for (int run = 0; run < runs; ++run) {
        const auto tasks = sample_task_instances(task, model.config().vocab_size, loaded.training_digests, seed, run,
                                                 per_run, task.shots, n,
                                                 static_cast<int>(config.get_int("layer_replace.validation_size")));
        const auto contexts = prepare_contexts(model, tasks);
        const GapReport g = measure_gap(model, contexts, tasks);
        gap.icl_accuracy += g.icl_accuracy / runs;
        gap.zero_shot_accuracy += g.zero_shot_accuracy / runs;
        for (const auto& method : methods) {
            const auto score = score_method(model, method, tasks, contexts, options);
            outcome.scatter.push_back(row_from_score(run, seed, to_string(task.family),
                                                     demo_count(task, task.shots), score, n, options.lambda, timing));
            EvalReport summary;
            summary.method = method;
            summary.accuracy = score.accuracy;
            summary.d_ntp = score.d_ntp;
            pooled[method].push_back(std::move(summary));
        }
    }
    out.note("icl_accuracy", gap.icl_accuracy);
    out.note("zero_shot_accuracy", gap.zero_shot_accuracy);
    if (gap.gap() < 0.3)
        throw Error(ErrorCode::gap_too_small, "ICL minus zero-shot accuracy is " + format_real(gap.gap()) +
                                                  " on this model; correlation studies need at least 0.3");

    CsvTable rho_table({"method", "rho", "runs", "status"});
    for (const auto& method : methods) {
        std::optional<double> rho;
        std::string status = "ok";
        try {
            rho = correlate(pooled[method]);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::degenerate_input) throw;
            status = "undefined";
        }
        outcome.rho.emplace_back(method, rho);
        rho_table.add_row({method, cell(rho), std::to_string(runs), status});
        say(log, method + " rho " + (rho ? format_real(*rho) : std::string("undefined")));
    }
    out.write("scatter.csv", results_table(outcome.scatter).render());
    out.write("correlation.csv", rho_table.render());
    out.finish();
    return outcome;
}

std::vector<ResultRow> cmd_sweep(const Config& config, const std::string& out_dir, const LogFn& log) {
    const auto loaded = load_for_eval(config.get("checkpoint"), true);
    const Model& model = loaded.checkpoint.model;
    const TaskConfig& task = loaded.checkpoint.train.task;
    const auto n_grid = config.get_int_list("sweep.n_grid");
    const auto lambda_grid = config.get_real_list("sweep.lambda_grid");
    const int runs = static_cast<int>(config.get_int("eval.runs"));
    const int per_run = static_cast<int>(config.get_int("eval.tasks_per_run"));
    const int default_n = static_cast<int>(config.get_int("ltv.num_queries"));
    const std::uint64_t seed = config.get_u64("seed");
    const auto base = method_options(config);
    for (int v : n_grid)
        if (v < 1) throw Error(ErrorCode::config_error, "sweep.n_grid entries must be >= 1");
    for (double v : lambda_grid)
        if (!(v > 0.0)) throw Error(ErrorCode::config_error, "sweep.lambda_grid entries must be > 0");
    const int max_n = std::max(default_n, *std::max_element(n_grid.begin(), n_grid.end()));

    // Tasks are drawn once with the largest N; smaller N use a prefix of the
    // same extraction list, so every grid point sees identical tasks.
    std::vector<std::vector<TaskInstance>> run_tasks;
    std::vector<std::vector<EvalContext>> run_contexts;
    for (int run = 0; run < runs; ++run) {
        run_tasks.push_back(sample_task_instances(task, model.config().vocab_size, loaded.training_digests, seed, run,
                                                  per_run, task.shots, max_n, 1));
        run_contexts.push_back(prepare_contexts(model, run_tasks.back()));
    }

    OutputDir out(out_dir, "sweep", config);
    out.digest("model", model.digest());
    std::vector<ResultRow> rows;
    auto point = [&](int n, double lambda) {
        MethodOptions options = base;
        options.lambda = lambda;
        ResultRow row;
        row.run_id = static_cast<int>(rows.size());
        row.seed = seed;
        row.method = "ltv";
        row.task_family = to_string(task.family);
        row.k = demo_count(task, task.shots);
        row.num_queries = n;
        row.lambda = lambda;
        double acc = 0.0, d = 0.0, l = 0.0;
        bool ok = true;
        double c1 = 0.0, c2 = 0.0;
        for (int run = 0; run < runs; ++run) {
            auto tasks = run_tasks[static_cast<std::size_t>(run)];
            for (auto& t : tasks) t.extraction_queries.resize(static_cast<std::size_t>(n));
            const auto score = score_method(model, "ltv", tasks, run_contexts[static_cast<std::size_t>(run)], options);
            acc += score.accuracy;
            d += *score.d_ntp;
            l += *score.l_mse;
            ok = ok && *score.bound_ok;
            c1 = std::max(c1, *score.c1);
            c2 = std::max(c2, *score.c2);
        }
        row.accuracy = acc / runs;
        row.d_ntp = d / runs;
        row.l_mse = l / runs;
        row.c1 = c1;
        row.c2 = c2;
        row.bound_ok = ok;
        say(log, "N " + std::to_string(n) + " lambda " + format_real(lambda) + " accuracy " +
                     format_real(*row.accuracy) + " d_ntp " + format_real(*row.d_ntp));
        rows.push_back(row);
    };
    for (int n : n_grid) point(n, base.lambda);
    for (double lambda : lambda_grid) point(default_n, lambda);
    out.write("sweep.csv", results_table(rows).render());
    out.finish();
    return rows;
}

TransferOutcome cmd_transfer(const Config& config, const std::string& out_dir, const LogFn& log) {
    const auto small = load_for_eval(config.get("checkpoint"), true);
    const auto large = load_for_eval(config.get("large_checkpoint"), true);
    const Model& s_model = small.checkpoint.model;
    const Model& l_model = large.checkpoint.model;
    if (s_model.config().vocab_size != l_model.config().vocab_size)
        throw Error(ErrorCode::vocab_mismatch, "checkpoints do not share a vocabulary");
    const TaskConfig& task = small.checkpoint.train.task;
    const int runs = static_cast<int>(config.get_int("eval.runs"));
    const int per_run = static_cast<int>(config.get_int("eval.tasks_per_run"));
    const int n = static_cast<int>(config.get_int("ltv.num_queries"));
    const std::uint64_t seed = config.get_u64("seed");
    const bool timing = config.get_bool("eval.record_timing");
    const auto options = method_options(config);
    const bool same_model = s_model.digest() == l_model.digest();

    auto seen = small.training_digests;
    seen.insert(large.training_digests.begin(), large.training_digests.end());

    OutputDir out(out_dir, "transfer", config);
    out.digest("small_model", s_model.digest());
    out.digest("large_model", l_model.digest());
    TransferOutcome outcome;
    std::map<std::string, double> mean_accuracy;
    const std::string family = to_string(task.family);
    const int k = demo_count(task, task.shots);
    for (int run = 0; run < runs; ++run) {
        const auto tasks =
            sample_task_instances(task, s_model.config().vocab_size, seen, seed, run, per_run, task.shots, n, 1);
        const auto s_contexts = prepare_contexts(s_model, tasks);
        const auto l_contexts = prepare_contexts(l_model, tasks);

        auto add = [&](const std::string& name, MethodScore score) {
            score.method = name;
            auto row = row_from_score(run, seed, family, k, score, n, options.lambda, timing);
            if (name == "small-ltv" || name == "large-ltv" || name == "transfer-ltv") {
                row.num_queries = n;
                row.lambda = options.lambda;
            }
            mean_accuracy[name] += score.accuracy / runs;
            outcome.rows.push_back(std::move(row));
        };
        add("small-zero-shot", score_method(s_model, "zero-shot", tasks, s_contexts, options));
        add("small-icl", score_method(s_model, "icl", tasks, s_contexts, options));
        const auto small_ltv = score_method(s_model, "ltv", tasks, s_contexts, options);
        for (const auto& rep : small_ltv.per_task)
            for (const auto& rec : rep.records) outcome.small_ltv_predictions.push_back(rec.predicted);
        add("small-ltv", small_ltv);
        add("large-ltv", score_method(l_model, "ltv", tasks, l_contexts, options));

        MethodScore transfer;
        transfer.method = "transfer-ltv";
        double d_sum = 0.0;
        std::size_t queries = 0;
        double extraction = 0.0, inference = 0.0;
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            const auto& t = tasks[i];
            const auto start = Clock::now();
            const auto m = extract_logit_ltv(l_model, s_model, t.demos, t.extraction_queries, options.lambda);
            extraction += elapsed_ms(start);
            if (same_model) {
                const auto ltv = extract_ltv(s_model, t.demos, t.extraction_queries, options.lambda);
                const Matrix expected = s_model.params().lm_head * std::get<LtvLinear>(ltv.body).w_star;
                const Matrix& got = std::get<LogitLtv>(m.body).w_tilde;
                const double err = (got - expected).norm() / std::max(got.norm(), 1e-300);
                outcome.max_relative_identity_error = std::max(outcome.max_relative_identity_error, err);
            }
            const auto infer = Clock::now();
            auto report = evaluate_method(s_model, m, s_contexts[i], t.truths);
            inference += elapsed_ms(infer);
            for (const auto& rec : report.records) outcome.transfer_predictions.push_back(rec.predicted);
            transfer.accuracy += report.accuracy / static_cast<double>(tasks.size());
            d_sum += *report.d_ntp;
            queries += t.eval_queries.size();
        }
        transfer.d_ntp = d_sum / static_cast<double>(tasks.size());
        transfer.extraction_ms = extraction / static_cast<double>(tasks.size());
        transfer.inference_us_per_query = 1000.0 * inference / static_cast<double>(queries);
        add("transfer-ltv", transfer);
    }

    CsvTable deltas({"method", "mean_accuracy", "delta_vs_small_ltv"});
    for (const char* name : {"small-zero-shot", "small-icl", "small-ltv", "large-ltv", "transfer-ltv"}) {
        const double acc = mean_accuracy[name];
        deltas.add_row({name, format_real(acc), format_real(acc - mean_accuracy["small-ltv"])});
        say(log, std::string(name) + " accuracy " + format_real(acc));
    }
    if (same_model) out.note("identity_relative_error", outcome.max_relative_identity_error);
    out.write("results.csv", results_table(outcome.rows).render());
    out.write("deltas.csv", deltas.render());
    out.finish();
    return outcome;
}

std::vector<ResultRow> cmd_regress(const Config& config, const std::string& out_dir, const LogFn& log) {
    const auto loaded = load_for_eval(config.get("checkpoint"), false);
    const Model& model = loaded.checkpoint.model;
    const TaskConfig& task = loaded.checkpoint.train.task;
    const auto scheme = NumericTokenScheme::for_vocab(model.config().vocab_size);
    const int num_tasks = static_cast<int>(config.get_int("regress.tasks"));
    const int per_task = static_cast<int>(config.get_int("regress.queries_per_task"));
    const int n = static_cast<int>(config.get_int("regress.extraction_queries"));
    const int max_new = static_cast<int>(config.get_int("regress.max_new_tokens"));
    const double lambda = config.get_real("ltv.lambda");
    const std::uint64_t seed = config.get_u64("seed");
    const bool timing = config.get_bool("eval.record_timing");
    if (num_tasks < 1 || per_task < 1 || n < 1 || max_new < 1)
        throw Error(ErrorCode::config_error, "regress.* counts must be >= 1");

    OutputDir out(out_dir, "regress", config);
    out.digest("model", model.digest());
    out.note("input_dim", task.input_dim);
    out.note("width", task.width);

    std::vector<RegressionCase> cases;
    std::vector<TaskVectorMethod> methods;
    const auto extract_start = Clock::now();
    for (int t = 0; t < num_tasks; ++t) {
        Rng rng = run_rng(seed, regression_stream, t);
        RegressionCase c{sample_regression_task(rng, regression_kind(task.family), task.input_dim, task.width), {}, {}};
        auto pair = [&] {
            Vector x = sample_regression_input(rng, task.input_dim);
            const double y = c.task.evaluate(x);
            return RegressionPair{std::move(x), y};
        };
        for (int i = 0; i < task.regression_shots; ++i) c.demos.push_back(pair());
        for (int i = 0; i < per_task; ++i) c.queries.push_back(pair());
        std::vector<Vector> inputs;
        for (int i = 0; i < n; ++i) inputs.push_back(sample_regression_input(rng, task.input_dim));
        methods.push_back(
            extract_ltv(build_regression_extraction_batch(model, c.demos, inputs, scheme, max_new), lambda));
        cases.push_back(std::move(c));
    }
    const double extraction_ms = elapsed_ms(extract_start) / num_tasks;

    std::vector<ResultRow> rows;
    for (auto mode : {RegressionMode::zero_shot, RegressionMode::icl, RegressionMode::ltv}) {
        const auto start = Clock::now();
        const auto result = regression_mse(model, mode, cases, methods, scheme, max_new);
        const double ms = elapsed_ms(start);
        ResultRow row;
        row.run_id = 0;
        row.seed = seed;
        row.method = to_string(mode);
        row.task_family = to_string(task.family);
        row.k = task.regression_shots;
        if (mode == RegressionMode::ltv) {
            row.num_queries = n;
            row.lambda = lambda;
            if (timing) row.extraction_ms = extraction_ms;
        }
        row.malformed_rate = result.malformed_rate;
        row.mse = result.mse;
        if (timing) row.inference_us_per_query = 1000.0 * ms / result.count;
        say(log, row.method + " mse " + format_real(result.mse) + " malformed " + format_real(result.malformed_rate));
        rows.push_back(std::move(row));
    }
    out.write("results.csv", results_table(rows).render());
    out.finish();
    return rows;
}

AuditOutcome cmd_audit(const Config& config, const std::string& out_dir, const LogFn& log) {
    const auto loaded = load_for_eval(config.get("checkpoint"), true);
    const Model& model = loaded.checkpoint.model;
    const TaskConfig& task = loaded.checkpoint.train.task;
    const int runs = static_cast<int>(config.get_int("eval.runs"));
    const int per_run = static_cast<int>(config.get_int("eval.tasks_per_run"));
    const int n = static_cast<int>(config.get_int("ltv.num_queries"));
    const int random_maps = static_cast<int>(config.get_int("audit.random_maps"));
    const std::uint64_t seed = config.get_u64("seed");
    const auto options = method_options(config);
    const int d = model.config().d_model;

    OutputDir out(out_dir, "audit", config);
    out.digest("model", model.digest());
    std::filesystem::create_directories(out.path("methods"));
    AuditOutcome outcome;
    const std::string family = to_string(task.family);
    const int k = demo_count(task, task.shots);

    auto record = [&](int run, const std::string& method, const BoundAudit& a, std::optional<int> num_queries,
                      std::optional<double> lambda) {
        ResultRow row;
        row.run_id = run;
        row.seed = seed;
        row.method = method;
        row.task_family = family;
        row.k = k;
        row.num_queries = num_queries;
        row.lambda = lambda;
        row.d_ntp = a.d_ntp;
        row.l_mse = a.l_mse;
        row.c1 = a.c1;
        row.c2 = a.c2;
        row.bound_ok = a.satisfied;
        ++outcome.audited;
        outcome.passed += a.satisfied ? 1 : 0;
        outcome.rows.push_back(std::move(row));
    };

    std::vector<std::vector<TaskInstance>> run_tasks;
    std::vector<std::vector<EvalContext>> run_contexts;
    for (int run = 0; run < runs; ++run) {
        run_tasks.push_back(sample_task_instances(task, model.config().vocab_size, loaded.training_digests, seed, run,
                                                  per_run, task.shots, n, 1));
        run_contexts.push_back(prepare_contexts(model, run_tasks.back()));
        const auto& tasks = run_tasks.back();
        for (std::size_t i = 0; i < tasks.size(); ++i) {
            const auto batch = build_extraction_batch(model, tasks[i].demos, tasks[i].extraction_queries);
            MlpTrainConfig mlp = options.mlp;
            mlp.seed = options.mlp.seed * 1000003ULL + i;
            const std::vector<std::pair<std::string, TaskVectorMethod>> extracted = {
                {"ltv", extract_ltv(batch, options.lambda)},
                {"constant", extract_constant(batch)},
                {"mlp", train_mlp_map(batch, mlp)},
            };
            // Audit the saved artifacts rather than the in-memory values.
            for (const auto& [name, method] : extracted) {
                const std::string file =
                    "methods/run" + std::to_string(run) + "_task" + std::to_string(i) + "_" + name + ".tvfg";
                save_method(out.path(file), method);
                out.record_file(file);
                const auto reloaded = load_method(out.path(file), model);
                const auto audit = audit_bound(model, reloaded, run_contexts.back()[i]);
                record(run, name, audit, n, name == "ltv" ? std::optional<double>(options.lambda) : std::nullopt);
            }
        }
    }

    // Random linear maps spread over every task, with scales from 1e-3 to 1.
    Rng rng = run_rng(seed, audit_stream, 0);
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    std::uniform_real_distribution<double> log_scale(-3.0, 0.0);
    for (int i = 0; i < random_maps; ++i) {
        const std::size_t run = static_cast<std::size_t>(i % runs);
        const auto& contexts = run_contexts[run];
        const std::size_t t = static_cast<std::size_t>(i / runs) % contexts.size();
        Matrix w(d, d);
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) w(r, c) = gauss(rng);
        w *= std::pow(10.0, log_scale(rng));
        TaskVectorMethod m;
        m.body = LtvLinear{std::move(w), 0.0, 0};
        m.model_digest = model.digest();
        record(static_cast<int>(run), "random-linear", audit_bound(model, m, contexts[t]), std::nullopt,
               std::nullopt);
    }

    say(log, "bound satisfied for " + std::to_string(outcome.passed) + " of " + std::to_string(outcome.audited) +
                 " audited maps");
    out.note("audited", outcome.audited);
    out.note("passed", outcome.passed);
    out.write("audit.csv", results_table(outcome.rows).render());
    out.finish();
    return outcome;
}

}  // namespace tvlab
