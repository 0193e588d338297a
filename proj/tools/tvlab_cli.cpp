// Command-line front end for the experiment harness.
//
//   tvlab <subcommand> [--config PATH] [--seed INT] [--out DIR] [--set key=value]...
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tvlab/error.hpp"
#include "tvlab/experiments.hpp"

namespace {

struct Options {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;
    long long seed = -1;
};

tvlab::Config build_config(const std::string& command, const Options& o) {
    tvlab::Config config = o.config_path.empty() ? tvlab::Config{} : tvlab::Config::load(o.config_path);
    for (const auto& assignment : o.overrides) config.set_assignment(assignment);
    if (o.seed >= 0) {
        const std::string seed = std::to_string(o.seed);
        config.set("seed", seed);
        if (command == "train") {
            config.set("model.rng_seed", seed);
            config.set("train.rng_seed", seed);
        }
    }
    return config;
}

int run(const std::string& command, const Options& o) {
    const auto log = [](const std::string& line) { std::cout << line << std::endl; };
    const tvlab::Config config = build_config(command, o);
    const std::string out = o.out_dir.empty() ? "runs/" + command : o.out_dir;
    if (command == "train") {
        config.require("task.family");
        const auto outcome = tvlab::cmd_train(config, out, log);
        if (outcome.gap)
            std::cout << "ICL - zero-shot gap: " << tvlab::format_real(outcome.gap->gap()) << "\n";
    } else if (command == "eval") {
        tvlab::cmd_eval(config, out, log);
    } else if (command == "correlate") {
        tvlab::cmd_correlate(config, out, log);
    } else if (command == "sweep") {
        tvlab::cmd_sweep(config, out, log);
    } else if (command == "transfer") {
        tvlab::cmd_transfer(config, out, log);
    } else if (command == "regress") {
        tvlab::cmd_regress(config, out, log);
    } else if (command == "audit") {
        const auto outcome = tvlab::cmd_audit(config, out, log);
        if (outcome.passed != outcome.audited) return 2;
    }
    std::cout << "outputs written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Task-vector laboratory: train toy transformers and study task-vector extraction"};
    app.require_subcommand(1, 1);
    Options options;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"train", "train a model on the configured task family"},
        {"eval", "accuracy, d_NTP, L_MSE and bound audit per method and run"},
        {"correlate", "correlation of d_NTP with accuracy over resampled demonstrations"},
        {"sweep", "LTV over the N and lambda grids"},
        {"transfer", "logit-space transfer from a large to a small model"},
        {"regress", "regression MSE for zero-shot, ICL and LTV generation"},
        {"audit", "bound audit on saved methods and random linear maps"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", options.config_path, "key = value configuration file");
        sub->add_option("--seed", options.seed, "experiment seed (train: model and stream seeds too)")
            ->check(CLI::NonNegativeNumber);
        sub->add_option("--out", options.out_dir, "output directory (default runs/<subcommand>)");
        sub->add_option("--set", options.overrides, "override one key, key=value (repeatable)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return run(command, options);
    } catch (const tvlab::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        const bool config_problem =
            e.code() == tvlab::ErrorCode::config_error || e.code() == tvlab::ErrorCode::invalid_config;
        return config_problem ? 1 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
