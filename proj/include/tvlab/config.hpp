#pragma once

// Flat key = value experiment configuration. Every key has a documented
// default; unknown keys are rejected.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tvlab/model.hpp"
#include "tvlab/trainer.hpp"
#include "tvlab/tvx.hpp"

namespace tvlab {

struct ConfigKey {
    std::string name;
    std::string default_value;  // empty means "no default"
    std::string help;
};

/// All recognised keys, in resolved-output order.
const std::vector<ConfigKey>& config_keys();

class Config {
public:
    /// Parses "key = value" lines; '#' starts a comment. Throws config_error
    /// with the line number on syntax errors and unknown keys.
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    /// Overrides one key, validating that it is known.
    void set(const std::string& key, const std::string& value);
    /// Applies "key=value".
    void set_assignment(const std::string& assignment);

    bool has(const std::string& key) const;
    /// Explicit value or the documented default; config_error names the key
    /// when neither exists.
    std::string get(const std::string& key) const;
    long long get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;
    std::vector<double> get_real_list(const std::string& key) const;
    std::vector<int> get_int_list(const std::string& key) const;
    /// Throws config_error naming the key if it has neither a value nor a default.
    void require(const std::string& key) const;

    /// Every key with its effective value, one "key = value" line each.
    std::string resolved() const;

    const std::map<std::string, std::string>& explicit_values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

ModelConfig model_config_from(const Config& config);
TrainConfig train_config_from(const Config& config);
TaskConfig task_config_from(const Config& config);
MlpTrainConfig mlp_config_from(const Config& config);

/// Writes model.*, train.* and task.* keys back as configuration text.
std::string render_model_config(const ModelConfig& model);
std::string render_train_config(const TrainConfig& train);

}  // namespace tvlab
