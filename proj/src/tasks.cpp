#include "tvlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "tvlab/hash.hpp"

namespace tvlab {

namespace {

constexpr double kMaxMagnitude = 99.99;

void append(std::vector<int>& out, const std::vector<int>& more) {
    out.insert(out.end(), more.begin(), more.end());
}

}  // namespace

NumericTokenScheme NumericTokenScheme::for_vocab(int vocab_size) {
    if (vocab_size < kReservedCount + 3)
        throw Error(ErrorCode::vocab_exhausted, "vocabulary too small for the numeric token scheme");
    NumericTokenScheme s;
    int next = vocab_size - kReservedCount;
    s.digit0 = next;
    next += 10;
    s.minus = next++;
    s.point = next++;
    s.lbracket = next++;
    s.rbracket = next++;
    s.comma = next++;
    s.newline = next++;
    s.x_marker = next++;
    s.y_marker = next++;
    s.separator = next++;
    return s;
}

int ClassificationTask::label_of(int query_token) const {
    const auto it = std::find(queries.begin(), queries.end(), query_token);
    if (it == queries.end()) throw Error(ErrorCode::token_out_of_range, "token is not a query of this task");
    return labels[mapping[static_cast<std::size_t>(it - queries.begin())]];
}

std::vector<int> ClassificationTask::preimage(int label_index) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < queries.size(); ++i)
        if (mapping[i] == label_index) out.push_back(queries[i]);
    return out;
}

std::uint64_t ClassificationTask::digest() const {
    Fnv1a h;
    h.integer(static_cast<long long>(labels.size()));
    for (int l : labels) h.integer(l);
    h.integer(static_cast<long long>(queries.size()));
    for (std::size_t i = 0; i < queries.size(); ++i) {
        h.integer(queries[i]);
        h.integer(mapping[i]);
    }
    return h.value();
}

std::uint64_t digest(const DemonstrationSet& demos) {
    Fnv1a h;
    h.integer(static_cast<long long>(demos.size()));
    for (const auto& d : demos) {
        h.integer(d.query);
        h.integer(d.label);
    }
    return h.value();
}

std::uint64_t digest(std::span<const RegressionPair> demos) {
    Fnv1a h;
    h.integer(static_cast<long long>(demos.size()));
    for (const auto& d : demos) {
        h.integer(d.x.size());
        for (Eigen::Index i = 0; i < d.x.size(); ++i) h.real(d.x[i]);
        h.real(d.y);
    }
    return h.value();
}

ClassificationTask sample_classification_task(Rng& rng, int num_labels, int num_queries, int vocab_size) {
    if (num_labels < 2) throw Error(ErrorCode::invalid_config, "need at least two labels");
    if (num_queries < num_labels) throw Error(ErrorCode::invalid_config, "need at least as many queries as labels");
    const auto scheme = NumericTokenScheme::for_vocab(vocab_size);
    const int first_query = num_labels + 1;
    const int pool_size = scheme.first_reserved() - first_query;
    if (pool_size < num_queries)
        throw Error(ErrorCode::vocab_exhausted, std::to_string(num_queries) + " queries requested, " +
                                                    std::to_string(std::max(pool_size, 0)) + " available");

    ClassificationTask task;
    task.labels.resize(num_labels);
    std::iota(task.labels.begin(), task.labels.end(), 1);

    std::vector<int> pool(pool_size);
    std::iota(pool.begin(), pool.end(), first_query);
    for (int i = 0; i < num_queries; ++i) {
        std::uniform_int_distribution<int> pick(i, pool_size - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    task.queries.assign(pool.begin(), pool.begin() + num_queries);
    std::sort(task.queries.begin(), task.queries.end());

    // Rejection sampling gives a uniform draw over the surjective mappings.
    std::uniform_int_distribution<int> label_dist(0, num_labels - 1);
    task.mapping.resize(num_queries);
    std::vector<int> seen(num_labels);
    while (true) {
        std::fill(seen.begin(), seen.end(), 0);
        for (int& m : task.mapping) {
            m = label_dist(rng);
            seen[m] = 1;
        }
        if (std::all_of(seen.begin(), seen.end(), [](int s) { return s != 0; })) break;
    }
    return task;
}

DemonstrationSet sample_demonstrations(const ClassificationTask& task, int k, Rng& rng) {
    const int num_labels = task.num_labels();
    if (k < num_labels)
        throw Error(ErrorCode::too_few_shots, "k=" + std::to_string(k) + " < K=" + std::to_string(num_labels));
    const int per_label = k / num_labels;
    DemonstrationSet demos;
    demos.reserve(static_cast<std::size_t>(per_label * num_labels));
    for (int c = 0; c < num_labels; ++c) {
        const auto pre = task.preimage(c);
        std::uniform_int_distribution<std::size_t> pick(0, pre.size() - 1);
        for (int i = 0; i < per_label; ++i) demos.push_back({pre[pick(rng)], task.labels[c]});
    }
    std::shuffle(demos.begin(), demos.end(), rng);
    return demos;
}

std::vector<int> encode_classification_prompt(std::span<const Demonstration> demos, int query, int max_seq_len) {
    const std::size_t length = 2 * demos.size() + 2;
    if (static_cast<long long>(length) > max_seq_len)
        throw Error(ErrorCode::sequence_too_long,
                    "prompt of " + std::to_string(length) + " tokens > " + std::to_string(max_seq_len));
    std::vector<int> tokens;
    tokens.reserve(length);
    tokens.push_back(kBosToken);
    for (const auto& d : demos) {
        tokens.push_back(d.query);
        tokens.push_back(d.label);
    }
    tokens.push_back(query);
    return tokens;
}

std::string to_string(RegressionKind kind) {
    return kind == RegressionKind::linear ? "linear" : "relu";
}

RegressionKind parse_regression_kind(const std::string& s) {
    if (s == "linear" || s == "regression-linear") return RegressionKind::linear;
    if (s == "relu" || s == "regression-relu") return RegressionKind::relu;
    throw Error(ErrorCode::config_error, "unknown regression kind '" + s + "'");
}

double RegressionTask::evaluate(const Vector& x) const {
    if (x.size() != input_dim) throw Error(ErrorCode::dimension_mismatch, "regression input dimension");
    if (kind == RegressionKind::linear) return w.dot(x);
    return alpha.dot((v * x).cwiseMax(0.0));
}

RegressionTask sample_regression_task(Rng& rng, RegressionKind kind, int input_dim, int width) {
    if (input_dim < 1) throw Error(ErrorCode::invalid_config, "regression input dimension must be >= 1");
    std::normal_distribution<double> normal(0.0, 1.0);
    RegressionTask task;
    task.kind = kind;
    task.input_dim = input_dim;
    if (kind == RegressionKind::linear) {
        task.w.resize(input_dim);
        for (int i = 0; i < input_dim; ++i) task.w[i] = normal(rng);
        return task;
    }
    if (width < 1) throw Error(ErrorCode::invalid_config, "relu width must be >= 1");
    task.width = width;
    task.v.resize(width, input_dim);
    for (int r = 0; r < width; ++r)
        for (int c = 0; c < input_dim; ++c) task.v(r, c) = normal(rng);
    task.alpha.resize(width);
    const double alpha_scale = 1.0 / std::sqrt(static_cast<double>(width));
    for (int r = 0; r < width; ++r) task.alpha[r] = alpha_scale * normal(rng);
    return task;
}

Vector sample_regression_input(Rng& rng, int input_dim) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector x(input_dim);
    for (int i = 0; i < input_dim; ++i) x[i] = normal(rng);
    return x;
}

double round_fixed(double value) {
    const double clamped = std::clamp(value, -kMaxMagnitude, kMaxMagnitude);
    return static_cast<double>(std::llround(clamped * 100.0)) / 100.0;
}

std::vector<int> encode_number(double value, const NumericTokenScheme& scheme) {
    const double clamped = std::clamp(value, -kMaxMagnitude, kMaxMagnitude);
    const long long cents = std::llround(clamped * 100.0);
    const long long magnitude = std::llabs(cents);
    std::vector<int> tokens;
    if (cents < 0) tokens.push_back(scheme.minus);
    const long long whole = magnitude / 100;
    const long long frac = magnitude % 100;
    if (whole >= 10) tokens.push_back(scheme.digit0 + static_cast<int>(whole / 10));
    tokens.push_back(scheme.digit0 + static_cast<int>(whole % 10));
    tokens.push_back(scheme.point);
    tokens.push_back(scheme.digit0 + static_cast<int>(frac / 10));
    tokens.push_back(scheme.digit0 + static_cast<int>(frac % 10));
    return tokens;
}

double decode_number(std::span<const int> tokens, const NumericTokenScheme& scheme) {
    std::string text;
    std::size_t i = 0;
    if (i < tokens.size() && tokens[i] == scheme.minus) {
        text.push_back('-');
        ++i;
    }
    bool any_digit = false;
    for (; i < tokens.size() && scheme.is_digit(tokens[i]); ++i) {
        text.push_back(static_cast<char>('0' + tokens[i] - scheme.digit0));
        any_digit = true;
    }
    if (i < tokens.size() && tokens[i] == scheme.point) {
        text.push_back('.');
        for (++i; i < tokens.size() && scheme.is_digit(tokens[i]); ++i) {
            text.push_back(static_cast<char>('0' + tokens[i] - scheme.digit0));
            any_digit = true;
        }
    }
    if (!any_digit) throw Error(ErrorCode::malformed_number, "no digit before terminator");
    if (text.back() == '.') text.pop_back();
    if (text == "-") throw Error(ErrorCode::malformed_number, "sign without digits");
    return std::strtod(text.c_str(), nullptr);
}

RegressionPrompt encode_regression_prompt(std::span<const RegressionPair> demos, const Vector& query,
                                          const NumericTokenScheme& scheme, int max_seq_len) {
    RegressionPrompt prompt;
    auto number = [&](double v) {
        if (std::abs(v) > kMaxMagnitude) ++prompt.clamped_values;
        append(prompt.tokens, encode_number(v, scheme));
    };
    auto x_block = [&](const Vector& x) {
        prompt.tokens.push_back(scheme.x_marker);
        prompt.tokens.push_back(scheme.lbracket);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            if (i > 0) prompt.tokens.push_back(scheme.comma);
            number(x[i]);
        }
        prompt.tokens.push_back(scheme.rbracket);
        prompt.tokens.push_back(scheme.newline);
        prompt.tokens.push_back(scheme.y_marker);
    };

    prompt.tokens.push_back(scheme.bos);
    for (const auto& d : demos) {
        x_block(d.x);
        number(d.y);
        prompt.tokens.push_back(scheme.newline);
        prompt.tokens.push_back(scheme.separator);
    }
    x_block(query);
    if (static_cast<int>(prompt.tokens.size()) > max_seq_len)
        throw Error(ErrorCode::sequence_too_long, "regression prompt of " + std::to_string(prompt.tokens.size()) +
                                                      " tokens > " + std::to_string(max_seq_len));
    return prompt;
}

}  // namespace tvlab
