// Acceptance run: one PASS/FAIL line per criterion. The reference models are
// trained from the configs in configs/ on first use and reused afterwards
// while their model and training settings are unchanged.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "tvlab/experiments.hpp"
#include "tvlab/linalg.hpp"
#include "tvlab/tvx.hpp"

using namespace tvlab;
namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config_dir = TVLAB_CONFIG_DIR;
    std::string work_dir = "acceptance";
    bool quiet = false;
};

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
    std::printf("[%s] %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

// Runs one criterion; an exception counts as a failure with its message.
void criterion(int id, const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
    const auto start = std::chrono::steady_clock::now();
    try {
        auto [pass, detail] = body();
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        char took[32];
        std::snprintf(took, sizeof took, " (%.1f s)", s);
        report(id, name, pass, detail + took);
    } catch (const std::exception& e) {
        report(id, name, false, std::string("error: ") + e.what());
    }
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, format, a, b, c, d);
    return buf;
}

LogFn logger(const Options& o) {
    if (o.quiet) return {};
    return [](const std::string& line) { std::printf("    %s\n", line.c_str()); std::fflush(stdout); };
}

// Trains the model described by `config_file` unless the work directory
// already holds a checkpoint with the same model and training settings.
std::string reference_model(const Options& o, const std::string& config_file, const std::string& name) {
    const Config config = Config::load((fs::path(o.config_dir) / config_file).string());
    const std::string dir = (fs::path(o.work_dir) / name).string();
    const std::string checkpoint = (fs::path(dir) / "model.tvfg").string();
    if (fs::exists(checkpoint)) {
        const auto cached = load_model(checkpoint);
        if (cached.model.config() == model_config_from(config) &&
            render_train_config(cached.train) == render_train_config(train_config_from(config))) {
            std::printf("    reusing %s\n", checkpoint.c_str());
            return checkpoint;
        }
    }
    std::printf("    training %s from %s\n", name.c_str(), config_file.c_str());
    const auto outcome = cmd_train(config, dir, logger(o));
    if (outcome.gap)
        std::printf("    reference gap: ICL %.4f, zero-shot %.4f\n", outcome.gap->icl_accuracy,
                    outcome.gap->zero_shot_accuracy);
    return checkpoint;
}

Config eval_config(const Options& o, const std::string& checkpoint) {
    Config c = Config::load((fs::path(o.config_dir) / "reference-eval.cfg").string());
    c.set("checkpoint", checkpoint);
    return c;
}

Matrix gaussian(int rows, int cols, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = n(rng);
    return m;
}

std::pair<bool, std::string> solver_exactness() {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(1, 64), count(1, 256);
    std::uniform_real_distribution<double> log_lambda(-3.0, 2.0);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const int d = dim(rng), n = count(rng), p = dim(rng);
        const Matrix h = gaussian(d, n, rng);
        const Matrix y = gaussian(p, n, rng);
        const double lambda = std::pow(10.0, log_lambda(rng));
        worst = std::max(worst, ridge_relative_residual(h, y, lambda, ridge_solve(h, y, lambda)));
    }
    Matrix y(2, 2);
    y << 2.0, 0.0, 0.0, 4.0;
    Matrix expected(2, 2);
    expected << 1.0, 0.0, 0.0, 2.0;
    const double hand = (ridge_solve(Matrix::Identity(2, 2), y, 1.0) - expected).cwiseAbs().maxCoeff();
    return {worst <= 1e-7 && hand <= 1e-15,
            fmt("worst relative residual %.3g over 100 instances (<= 1e-7); hand case error %.3g", worst, hand)};
}

double relative_gap(double analytic, double numeric) {
    return std::abs(analytic - numeric) / (std::abs(analytic) + 1e-8);
}

std::pair<bool, std::string> gradient_fidelity() {
    // d = 24 so the smallest families (final norm gain and bias) still
    // offer 20 coordinates.
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 24;
    c.n_heads = 2;
    c.d_ff = 32;
    c.vocab_size = 40;
    c.max_seq_len = 48;
    Parameters p = init_parameters(c);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> noise(0.0, 0.3);
    Parameters::visit(p, [&](const std::string& name, Matrix& m) {
        m = m.unaryExpr([&](double) { return noise(rng); });
        if (name.find("gain") != std::string::npos) m.array() += 1.0;
    });
    TrainConfig train;
    train.task.shots = 8;
    train.query_pool = 4;
    Rng batch_rng(8);
    const auto batch = sample_training_batch(train, 3, c, batch_rng, nullptr);
    const auto analytic = backward(p, batch);

    // A family is a tensor name with its layer index removed; coordinates
    // are drawn from the pooled layers.
    Parameters probe = p;
    std::vector<Matrix*> tensors;
    std::vector<const Matrix*> grads;
    std::map<std::string, std::vector<std::pair<std::size_t, Eigen::Index>>> families;
    Parameters::visit(analytic.gradient, [&](const std::string&, const Matrix& m) { grads.push_back(&m); });
    Parameters::visit(probe, [&](const std::string& name, Matrix& m) {
        const std::regex layer_index(R"(^layers\.\d+\.)");
        auto& family = families[std::regex_replace(name, layer_index, "layers.")];
        const std::size_t t = tensors.size();
        tensors.push_back(&m);
        for (Eigen::Index i = 0; i < m.size(); ++i)
            if (std::abs((*grads[t])(i)) > 1e-7) family.emplace_back(t, i);
    });
    const double h = 1e-5;
    double worst = 0.0;
    int checked = 0, thin = 0;
    for (auto& [name, candidates] : families) {
        std::shuffle(candidates.begin(), candidates.end(), rng);
        if (candidates.size() < 20) ++thin;
        candidates.resize(std::min<std::size_t>(candidates.size(), 20));
        for (auto [t, i] : candidates) {
            Matrix& m = *tensors[t];
            const double keep = m(i);
            m(i) = keep + h;
            const double up = batch_loss(probe, batch);
            m(i) = keep - h;
            const double down = batch_loss(probe, batch);
            m(i) = keep;
            worst = std::max(worst, relative_gap((*grads[t])(i), (up - down) / (2.0 * h)));
            ++checked;
        }
    }
    const int n_families = static_cast<int>(families.size());
    const bool enough = thin == 0;

    // The map's hidden states and targets come from random data.
    const int d = 8;
    const Matrix hs = gaussian(d, 24, rng);
    const Matrix ys = gaussian(d, 24, rng);
    MlpMap map = init_mlp_map(d, 12, 3);
    const MlpGradient mg = mlp_map_gradient(map, hs, ys);
    double mlp_worst = 0.0;
    int mlp_checked = 0;
    for (auto [w, g] : {std::pair<Matrix*, const Matrix*>{&map.w1, &mg.w1}, {&map.w2, &mg.w2}}) {
        std::vector<Eigen::Index> candidates;
        for (Eigen::Index i = 0; i < g->size(); ++i)
            if (std::abs((*g)(i)) > 1e-7) candidates.push_back(i);
        std::shuffle(candidates.begin(), candidates.end(), rng);
        candidates.resize(std::min<std::size_t>(candidates.size(), 20));
        for (Eigen::Index i : candidates) {
            const double keep = (*w)(i);
            (*w)(i) = keep + h;
            const double up = mlp_map_loss(map, hs, ys);
            (*w)(i) = keep - h;
            const double down = mlp_map_loss(map, hs, ys);
            (*w)(i) = keep;
            mlp_worst = std::max(mlp_worst, relative_gap((*g)(i), (up - down) / (2.0 * h)));
            ++mlp_checked;
        }
    }
    const bool pass = enough && worst < 1e-4 && mlp_worst < 1e-4 && mlp_checked >= 40;
    return {pass, fmt("transformer: %.0f coordinates over %.0f families (%.0f with fewer than 20), worst %.3g; ", checked,
                          n_families, thin, worst) +
                      fmt("MLP map: %.0f coordinates, worst %.3g (< 1e-4)", mlp_checked, mlp_worst)};
}

double mean_of(const std::vector<ResultRow>& rows, const std::string& method,
               const std::function<std::optional<double>(const ResultRow&)>& field) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (r.method != method) continue;
        const auto v = field(r);
        if (!v) throw Error(ErrorCode::invalid_config, "missing " + method + " value");
        sum += *v;
        ++n;
    }
    if (n == 0) throw Error(ErrorCode::invalid_config, "no rows for " + method);
    return sum / n;
}

std::pair<bool, std::string> balanced_sampling() {
    Rng rng(30);
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
        const auto task = sample_classification_task(rng, 4, 8, 64);
        const auto demos = sample_demonstrations(task, 30, rng);
        std::map<int, int> counts;
        for (const auto& d : demos) {
            ++counts[d.label];
            ok = ok && task.label_of(d.query) == d.label;
        }
        ok = ok && demos.size() == 28 && counts.size() == 4;
        for (const auto& [label, n] : counts) ok = ok && n == 7;
    }
    return {ok, "200 random tasks with K=4, k=30: 28 demonstrations, 7 per label"};
}

std::pair<bool, std::string> persistence(const Options& o, const std::string& checkpoint) {
    const auto loaded = load_model(checkpoint);
    const std::string bytes = read_file(checkpoint);
    const bool model_ok = encode_model(loaded.model, loaded.train) == bytes &&
                          decode_model(bytes).model.digest() == loaded.model.digest();

    Rng rng(31);
    const auto task = sample_classification_task(rng, 4, 8, loaded.model.config().vocab_size);
    const auto demos = sample_demonstrations(task, 30, rng);
    const auto batch = build_extraction_batch(loaded.model, demos, task.queries);
    MlpTrainConfig mlp;
    mlp.epochs = 2;
    bool methods_ok = true;
    const std::string path = (fs::path(o.work_dir) / "roundtrip.tvfg").string();
    for (const auto& m : {extract_ltv(batch, 5.0), extract_constant(batch), train_mlp_map(batch, mlp)}) {
        save_method(path, m);
        const std::string saved = read_file(path);
        methods_ok = methods_ok && encode_method(load_method(path, loaded.model)) == saved;
    }
    fs::remove(path);

    Config c = eval_config(o, checkpoint);
    c.set("eval.runs", "1");
    c.set("eval.tasks_per_run", "3");
    c.set("ltv.num_queries", "64");
    c.set("mlp.epochs", "2");
    const std::string a = (fs::path(o.work_dir) / "repro-a").string();
    const std::string b = (fs::path(o.work_dir) / "repro-b").string();
    cmd_eval(c, a, {});
    cmd_eval(c, b, {});
    const bool csv_ok = read_file(a + "/results.csv") == read_file(b + "/results.csv");
    return {model_ok && methods_ok && csv_ok,
            std::string("model checkpoint ") + (model_ok ? "bit-identical" : "differs") + ", methods " +
                (methods_ok ? "bit-identical" : "differ") + ", repeated eval CSV " + (csv_ok ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
    Options o;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--configs" && i + 1 < argc) o.config_dir = argv[++i];
        else if (arg == "--work" && i + 1 < argc) o.work_dir = argv[++i];
        else if (arg == "--quiet") o.quiet = true;
        else {
            std::fprintf(stderr, "usage: %s [--configs DIR] [--work DIR] [--quiet]\n", argv[0]);
            return 1;
        }
    }
    fs::create_directories(o.work_dir);

    criterion(1, "solver exactness", solver_exactness);
    criterion(2, "gradient fidelity", gradient_fidelity);
    criterion(10, "balanced sampling", balanced_sampling);

    std::string small, regression;
    try {
        small = reference_model(o, "reference-classification.cfg", "train-classification");
        regression = reference_model(o, "reference-regression.cfg", "train-regression");
    } catch (const std::exception& e) {
        std::printf("reference training failed: %s\n", e.what());
    }

    criterion(3, "bound audit", [&] {
        const auto a = cmd_audit(eval_config(o, small), (fs::path(o.work_dir) / "audit").string(), logger(o));
        return std::pair{a.passed == a.audited && a.audited >= 500,
                         fmt("%.0f of %.0f maps satisfy the bound (100%% required)", a.passed, a.audited)};
    });

    criterion(4, "same-model transfer identity", [&] {
        Config c = eval_config(o, small);
        c.set("large_checkpoint", small);
        const auto t = cmd_transfer(c, (fs::path(o.work_dir) / "transfer").string(), logger(o));
        const bool agree = t.small_ltv_predictions == t.transfer_predictions && !t.transfer_predictions.empty();
        return std::pair{t.max_relative_identity_error < 1e-6 && agree,
                         fmt("relative Frobenius error %.3g (< 1e-6); %.0f per-query predictions ",
                             t.max_relative_identity_error, static_cast<double>(t.transfer_predictions.size())) +
                             (agree ? "agree" : "disagree")};
    });

    criterion(5, "correlation sign", [&] {
        const auto r = cmd_correlate(eval_config(o, small), (fs::path(o.work_dir) / "correlate").string(), logger(o));
        for (const auto& [method, rho] : r.rho)
            if (method == "ltv")
                return std::pair{rho.has_value() && *rho <= -0.3,
                                 rho ? fmt("LTV rho %.4f over 20 resampled demonstration sets (<= -0.3)", *rho)
                                     : std::string("LTV rho undefined")};
        return std::pair{false, std::string("no LTV correlation computed")};
    });

    std::vector<ResultRow> eval_rows;
    bool eval_ok = false;
    try {
        eval_rows = cmd_eval(eval_config(o, small), (fs::path(o.work_dir) / "eval").string(), logger(o));
        eval_ok = true;
    } catch (const std::exception& e) {
        std::printf("evaluation failed: %s\n", e.what());
    }

    criterion(6, "method ordering", [&] {
        if (!eval_ok) throw Error(ErrorCode::io_error, "evaluation unavailable");
        auto dntp = [](const ResultRow& r) { return r.d_ntp; };
        auto lmse = [](const ResultRow& r) { return r.l_mse; };
        const double d_ltv = mean_of(eval_rows, "ltv", dntp), d_const = mean_of(eval_rows, "constant", dntp);
        const double l_mlp = mean_of(eval_rows, "mlp", lmse), l_ltv = mean_of(eval_rows, "ltv", lmse),
                     l_const = mean_of(eval_rows, "constant", lmse);
        return std::pair{d_ltv < d_const && l_mlp <= l_ltv && l_ltv < l_const,
                         fmt("d_NTP LTV %.4g < constant %.4g; ", d_ltv, d_const) +
                             fmt("L_MSE MLP %.4g <= LTV %.4g < constant %.4g", l_mlp, l_ltv, l_const)};
    });

    criterion(7, "accuracy sandwich", [&] {
        if (!eval_ok) throw Error(ErrorCode::io_error, "evaluation unavailable");
        auto acc = [](const ResultRow& r) { return r.accuracy; };
        const double zs = mean_of(eval_rows, "zero-shot", acc), ltv = mean_of(eval_rows, "ltv", acc),
                     icl = mean_of(eval_rows, "icl", acc);
        return std::pair{zs < ltv && ltv <= icl && ltv - zs >= 0.15,
                         fmt("zero-shot %.4f < LTV %.4f <= ICL %.4f; LTV - zero-shot %.4f (>= 0.15)", zs, ltv, icl,
                             ltv - zs)};
    });

    criterion(8, "hyperparameter trends", [&] {
        const auto rows = cmd_sweep(eval_config(o, small), (fs::path(o.work_dir) / "sweep").string(), logger(o));
        std::vector<double> by_n, lambda_acc;
        std::string detail = "d_NTP over N:";
        for (std::size_t i = 0; i < 3; ++i) {
            by_n.push_back(*rows[i].d_ntp);
            detail += fmt(" %.4g", by_n.back());
        }
        for (std::size_t i = 3; i < rows.size(); ++i) lambda_acc.push_back(*rows[i].accuracy);
        const bool monotone = by_n[1] <= by_n[0] && by_n[2] <= by_n[1];
        const auto [lo, hi] = std::minmax_element(lambda_acc.begin(), lambda_acc.end());
        return std::pair{monotone && *hi - *lo < 0.02,
                         detail + fmt(" (non-increasing); accuracy spread over lambda %.4f (< 0.02)", *hi - *lo)};
    });

    criterion(9, "regression ordering", [&] {
        Config c = eval_config(o, regression);
        const auto rows = cmd_regress(c, (fs::path(o.work_dir) / "regress").string(), logger(o));
        std::map<std::string, const ResultRow*> by;
        for (const auto& r : rows) by[r.method] = &r;
        const double zs = *by.at("zero-shot")->mse, icl = *by.at("icl")->mse, ltv = *by.at("ltv")->mse;
        double malformed = 0.0;
        for (const auto& r : rows) malformed = std::max(malformed, *r.malformed_rate);
        return std::pair{icl < zs && ltv < zs && malformed < 0.05,
                         fmt("MSE ICL %.4g, LTV %.4g, zero-shot %.4g; worst malformed rate %.4f (< 0.05)", icl, ltv,
                             zs, malformed)};
    });

    criterion(11, "persistence", [&] { return persistence(o, small); });

    std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "NOT ACCEPTED", failures);
    return failures == 0 ? 0 : 1;
}
