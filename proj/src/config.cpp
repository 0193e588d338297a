#include "tvlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "tvlab/error.hpp"

namespace tvlab {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

const ConfigKey* find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return &k;
    return nullptr;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
    throw Error(ErrorCode::config_error, "key '" + key + "': '" + value + "' is not " + expected);
}

std::string real_text(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"model.n_layers", "2", "transformer blocks"},
        {"model.d_model", "64", "residual width"},
        {"model.n_heads", "4", "attention heads"},
        {"model.d_ff", "256", "feed-forward width"},
        {"model.vocab_size", "64", "vocabulary size"},
        {"model.max_seq_len", "128", "maximum sequence length"},
        {"model.rng_seed", "1", "initialisation seed"},
        {"train.steps", "20000", "optimizer steps"},
        {"train.batch_size", "32", "sequences per step"},
        {"train.learning_rate", "0.001", "peak Adam learning rate"},
        {"train.beta1", "0.9", "Adam beta1"},
        {"train.beta2", "0.999", "Adam beta2"},
        {"train.epsilon", "1e-08", "Adam epsilon"},
        {"train.warmup_fraction", "0.05", "linear warmup share of steps"},
        {"train.rng_seed", "1", "task stream seed"},
        {"train.demo_sampling", "independent", "independent | balanced demonstrations in training prompts"},
        {"train.query_pool", "8", "query tokens per training task"},
        {"task.family", "classification", "classification | regression-linear | regression-relu"},
        {"task.num_labels", "4", "K, label tokens per task"},
        {"task.num_queries", "4", "query tokens per held-out classification task"},
        {"task.shots", "30", "k, demonstrations (floor(k/K)*K are used)"},
        {"task.input_dim", "2", "m, regression input dimension"},
        {"task.width", "16", "r, hidden width of relu regression tasks"},
        {"task.regression_shots", "4", "demonstrations per regression prompt"},
        {"checkpoint", "", "model checkpoint to evaluate"},
        {"large_checkpoint", "", "source model for logit-space transfer"},
        {"seed", "1", "experiment seed"},
        {"eval.runs", "5", "independently resampled demonstration sets"},
        {"eval.tasks_per_run", "25", "held-out tasks per run"},
        {"eval.methods", "zero-shot,icl,ltv,constant,layer-replace,mlp", "methods to evaluate"},
        {"eval.record_timing", "false", "fill the timing columns (not reproducible)"},
        {"ltv.lambda", "5", "ridge regularisation"},
        {"ltv.num_queries", "256", "N, extraction queries"},
        {"layer_replace.validation_size", "32", "labelled pairs used to pick the layer"},
        {"mlp.epochs", "100", "MLP map epochs"},
        {"mlp.learning_rate", "0.01", "MLP map peak learning rate"},
        {"mlp.batch_size", "8", "MLP map minibatch"},
        {"mlp.warmup_fraction", "0.1", "MLP map warmup share"},
        {"mlp.width", "0", "MLP hidden width (0 = d_model)"},
        {"correlate.runs", "20", "resampled demonstration sets"},
        {"correlate.tasks_per_run", "1", "held-out tasks per correlation run"},
        {"correlate.methods", "ltv,constant,mlp", "methods pooled in the correlation study"},
        {"sweep.n_grid", "64,128,256", "N values"},
        {"sweep.lambda_grid", "1,5,10", "lambda values"},
        {"regress.tasks", "20", "held-out regression tasks"},
        {"regress.queries_per_task", "10", "held-out queries per task"},
        {"regress.extraction_queries", "64", "unlabelled inputs used for regression LTV"},
        {"regress.max_new_tokens", "8", "generation budget per answer"},
        {"audit.random_maps", "500", "random linear maps audited"},
    };
    return keys;
}

Config Config::parse(const std::string& text) {
    Config c;
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCode::config_error, "line " + std::to_string(number) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (!find_key(key))
            throw Error(ErrorCode::config_error, "line " + std::to_string(number) + ": unknown key '" + key + "'");
        c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::config_error, "cannot read config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
}

void Config::set(const std::string& key, const std::string& value) {
    if (!find_key(key)) throw Error(ErrorCode::config_error, "unknown key '" + key + "'");
    values_[key] = trim(value);
}

void Config::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::config_error, "expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

bool Config::has(const std::string& key) const {
    if (values_.contains(key)) return !values_.at(key).empty();
    const auto* k = find_key(key);
    return k && !k->default_value.empty();
}

std::string Config::get(const std::string& key) const {
    const auto* k = find_key(key);
    if (!k) throw Error(ErrorCode::config_error, "unknown key '" + key + "'");
    if (auto it = values_.find(key); it != values_.end() && !it->second.empty()) return it->second;
    if (k->default_value.empty()) throw Error(ErrorCode::config_error, "missing required key '" + key + "'");
    return k->default_value;
}

void Config::require(const std::string& key) const {
    (void)get(key);
}

long long Config::get_int(const std::string& key) const {
    const std::string v = get(key);
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
    return out;
}

std::uint64_t Config::get_u64(const std::string& key) const {
    const std::string v = get(key);
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an unsigned integer");
    return out;
}

double Config::get_real(const std::string& key) const {
    const std::string v = get(key);
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "a number");
    return out;
}

bool Config::get_bool(const std::string& key) const {
    const std::string v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, v, "a boolean");
}

std::vector<std::string> Config::get_list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream in(get(key));
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    if (out.empty()) throw Error(ErrorCode::config_error, "key '" + key + "' needs at least one entry");
    return out;
}

std::vector<double> Config::get_real_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : get_list(key)) {
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || ptr != item.data() + item.size()) bad_value(key, item, "a number");
        out.push_back(v);
    }
    return out;
}

std::vector<int> Config::get_int_list(const std::string& key) const {
    std::vector<int> out;
    for (const auto& item : get_list(key)) {
        int v = 0;
        const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc() || ptr != item.data() + item.size()) bad_value(key, item, "an integer");
        out.push_back(v);
    }
    return out;
}

std::string Config::resolved() const {
    std::string out;
    for (const auto& k : config_keys()) {
        const auto it = values_.find(k.name);
        const std::string value = it != values_.end() ? it->second : k.default_value;
        out += k.name + " = " + value + "\n";
    }
    return out;
}

ModelConfig model_config_from(const Config& c) {
    ModelConfig m;
    m.n_layers = static_cast<int>(c.get_int("model.n_layers"));
    m.d_model = static_cast<int>(c.get_int("model.d_model"));
    m.n_heads = static_cast<int>(c.get_int("model.n_heads"));
    m.d_ff = static_cast<int>(c.get_int("model.d_ff"));
    m.vocab_size = static_cast<int>(c.get_int("model.vocab_size"));
    m.max_seq_len = static_cast<int>(c.get_int("model.max_seq_len"));
    m.rng_seed = c.get_u64("model.rng_seed");
    try {
        m.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::config_error, e.what());
    }
    return m;
}

TaskConfig task_config_from(const Config& c) {
    TaskConfig t;
    t.family = parse_task_family(c.get("task.family"));
    t.num_labels = static_cast<int>(c.get_int("task.num_labels"));
    t.num_queries = static_cast<int>(c.get_int("task.num_queries"));
    t.shots = static_cast<int>(c.get_int("task.shots"));
    t.input_dim = static_cast<int>(c.get_int("task.input_dim"));
    t.width = static_cast<int>(c.get_int("task.width"));
    t.regression_shots = static_cast<int>(c.get_int("task.regression_shots"));
    return t;
}

TrainConfig train_config_from(const Config& c) {
    TrainConfig t;
    t.steps = static_cast<int>(c.get_int("train.steps"));
    t.batch_size = static_cast<int>(c.get_int("train.batch_size"));
    t.learning_rate = c.get_real("train.learning_rate");
    t.beta1 = c.get_real("train.beta1");
    t.beta2 = c.get_real("train.beta2");
    t.epsilon = c.get_real("train.epsilon");
    t.warmup_fraction = c.get_real("train.warmup_fraction");
    t.rng_seed = c.get_u64("train.rng_seed");
    t.demo_sampling = parse_demo_sampling(c.get("train.demo_sampling"));
    t.query_pool = static_cast<int>(c.get_int("train.query_pool"));
    t.task = task_config_from(c);
    try {
        t.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::config_error, e.what());
    }
    return t;
}

MlpTrainConfig mlp_config_from(const Config& c) {
    MlpTrainConfig m;
    m.epochs = static_cast<int>(c.get_int("mlp.epochs"));
    m.learning_rate = c.get_real("mlp.learning_rate");
    m.batch_size = static_cast<int>(c.get_int("mlp.batch_size"));
    m.warmup_fraction = c.get_real("mlp.warmup_fraction");
    m.width = static_cast<int>(c.get_int("mlp.width"));
    m.seed = c.get_u64("seed");
    if (m.epochs < 1 || m.batch_size < 1 || m.width < 0)
        throw Error(ErrorCode::config_error, "mlp.epochs and mlp.batch_size must be >= 1, mlp.width >= 0");
    return m;
}

std::string render_model_config(const ModelConfig& m) {
    std::string out;
    out += "model.n_layers = " + std::to_string(m.n_layers) + "\n";
    out += "model.d_model = " + std::to_string(m.d_model) + "\n";
    out += "model.n_heads = " + std::to_string(m.n_heads) + "\n";
    out += "model.d_ff = " + std::to_string(m.d_ff) + "\n";
    out += "model.vocab_size = " + std::to_string(m.vocab_size) + "\n";
    out += "model.max_seq_len = " + std::to_string(m.max_seq_len) + "\n";
    out += "model.rng_seed = " + std::to_string(m.rng_seed) + "\n";
    return out;
}

std::string render_train_config(const TrainConfig& t) {
    std::string out;
    out += "train.steps = " + std::to_string(t.steps) + "\n";
    out += "train.batch_size = " + std::to_string(t.batch_size) + "\n";
    out += "train.learning_rate = " + real_text(t.learning_rate) + "\n";
    out += "train.beta1 = " + real_text(t.beta1) + "\n";
    out += "train.beta2 = " + real_text(t.beta2) + "\n";
    out += "train.epsilon = " + real_text(t.epsilon) + "\n";
    out += "train.warmup_fraction = " + real_text(t.warmup_fraction) + "\n";
    out += "train.rng_seed = " + std::to_string(t.rng_seed) + "\n";
    out += "train.demo_sampling = " + to_string(t.demo_sampling) + "\n";
    out += "train.query_pool = " + std::to_string(t.query_pool) + "\n";
    out += "task.family = " + to_string(t.task.family) + "\n";
    out += "task.num_labels = " + std::to_string(t.task.num_labels) + "\n";
    out += "task.num_queries = " + std::to_string(t.task.num_queries) + "\n";
    out += "task.shots = " + std::to_string(t.task.shots) + "\n";
    out += "task.input_dim = " + std::to_string(t.task.input_dim) + "\n";
    out += "task.width = " + std::to_string(t.task.width) + "\n";
    out += "task.regression_shots = " + std::to_string(t.task.regression_shots) + "\n";
    return out;
}

}  // namespace tvlab
