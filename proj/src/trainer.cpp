#include "tvlab/trainer.hpp"

#include <cmath>
#include <numbers>

namespace tvlab {

std::string to_string(TaskFamily family) {
    switch (family) {
        case TaskFamily::classification: return "classification";
        case TaskFamily::regression_linear: return "regression-linear";
        case TaskFamily::regression_relu: return "regression-relu";
    }
    return "unknown";
}

TaskFamily parse_task_family(const std::string& s) {
    if (s == "classification") return TaskFamily::classification;
    if (s == "regression-linear") return TaskFamily::regression_linear;
    if (s == "regression-relu") return TaskFamily::regression_relu;
    throw Error(ErrorCode::config_error, "unknown task family '" + s + "'");
}

std::string to_string(DemoSampling sampling) {
    return sampling == DemoSampling::balanced ? "balanced" : "independent";
}

DemoSampling parse_demo_sampling(const std::string& s) {
    if (s == "independent") return DemoSampling::independent;
    if (s == "balanced") return DemoSampling::balanced;
    throw Error(ErrorCode::config_error, "unknown demo sampling '" + s + "'");
}

bool is_regression(TaskFamily family) {
    return family != TaskFamily::classification;
}

RegressionKind regression_kind(TaskFamily family) {
    return family == TaskFamily::regression_relu ? RegressionKind::relu : RegressionKind::linear;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::invalid_config, what); };
    if (steps < 0) fail("train.steps must be >= 0");
    if (batch_size < 1) fail("train.batch_size must be >= 1");
    if (!(learning_rate >= 0.0)) fail("train.learning_rate must be >= 0");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("adam betas must lie in (0,1)");
    if (!(epsilon > 0.0)) fail("adam epsilon must be > 0");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must lie in [0,1)");
    if (query_pool < task.num_labels) fail("train.query_pool must be >= task.num_labels");
}

double warmup_cosine_rate(double base_rate, double warmup_fraction, int total_steps, int step_index) {
    const int warmup = static_cast<int>(std::floor(warmup_fraction * total_steps));
    if (step_index < warmup) return base_rate * static_cast<double>(step_index + 1) / warmup;
    const int decay_steps = total_steps - warmup;
    if (decay_steps <= 0) return base_rate;
    const double progress = static_cast<double>(step_index - warmup) / decay_steps;
    return base_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double learning_rate_at(const TrainConfig& config, int step_index) {
    return warmup_cosine_rate(config.learning_rate, config.warmup_fraction, config.steps, step_index);
}

AdamState AdamState::zeros(const Parameters& like) {
    return AdamState{zeros_like(like), zeros_like(like)};
}

void adam_step(Parameters& params, const Parameters& grads, AdamState& state, int step_index,
               const TrainConfig& config) {
    std::vector<Matrix*> p_list, m_list, v_list;
    std::vector<const Matrix*> g_list;
    Parameters::visit(params, [&](const std::string&, Matrix& m) { p_list.push_back(&m); });
    Parameters::visit(grads, [&](const std::string&, const Matrix& m) { g_list.push_back(&m); });
    Parameters::visit(state.first_moment, [&](const std::string&, Matrix& m) { m_list.push_back(&m); });
    Parameters::visit(state.second_moment, [&](const std::string&, Matrix& m) { v_list.push_back(&m); });
    if (p_list.size() != g_list.size() || p_list.size() != m_list.size() || p_list.size() != v_list.size())
        throw Error(ErrorCode::shape_mismatch, "parameter, gradient and state tensor counts differ");
    for (std::size_t i = 0; i < p_list.size(); ++i) {
        const auto same = [&](const Matrix* other) {
            return other->rows() == p_list[i]->rows() && other->cols() == p_list[i]->cols();
        };
        if (!same(g_list[i]) || !same(m_list[i]) || !same(v_list[i]))
            throw Error(ErrorCode::shape_mismatch, "tensor " + std::to_string(i) + " shape differs");
    }

    const double lr = learning_rate_at(config, step_index);
    const double t = static_cast<double>(step_index + 1);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < p_list.size(); ++i) {
        auto m = m_list[i]->array();
        auto v = v_list[i]->array();
        const auto g = g_list[i]->array();
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = config.beta2 * v + (1.0 - config.beta2) * g.square();
        if (lr == 0.0) continue;
        p_list[i]->array() -= lr * (m / correction1) / ((v / correction2).sqrt() + config.epsilon);
    }
}

TrainingExample make_classification_example(std::span<const Demonstration> pairs, int max_seq_len) {
    TrainingExample ex;
    if (static_cast<int>(2 * pairs.size() + 1) > max_seq_len)
        throw Error(ErrorCode::sequence_too_long, "training sequence exceeds max_seq_len");
    ex.tokens.push_back(kBosToken);
    for (const auto& p : pairs) {
        ex.targets.push_back({static_cast<int>(ex.tokens.size()), p.label});
        ex.tokens.push_back(p.query);
        ex.tokens.push_back(p.label);
    }
    return ex;
}

TrainingExample make_regression_example(std::span<const RegressionPair> demos, const RegressionPair& query,
                                        const NumericTokenScheme& scheme, int max_seq_len) {
    TrainingExample ex;
    auto add_x = [&](const Vector& x) {
        ex.tokens.push_back(scheme.x_marker);
        ex.tokens.push_back(scheme.lbracket);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            if (i > 0) ex.tokens.push_back(scheme.comma);
            const auto digits = encode_number(x[i], scheme);
            ex.tokens.insert(ex.tokens.end(), digits.begin(), digits.end());
        }
        ex.tokens.push_back(scheme.rbracket);
        ex.tokens.push_back(scheme.newline);
        ex.tokens.push_back(scheme.y_marker);
    };
    auto add_answer = [&](double y) {
        auto answer = encode_number(y, scheme);
        answer.push_back(scheme.newline);
        for (int tok : answer) {
            ex.targets.push_back({static_cast<int>(ex.tokens.size()) - 1, tok});
            ex.tokens.push_back(tok);
        }
    };
    ex.tokens.push_back(scheme.bos);
    for (const auto& d : demos) {
        add_x(d.x);
        add_answer(d.y);
        ex.tokens.push_back(scheme.separator);
    }
    add_x(query.x);
    add_answer(query.y);
    // The final newline is only ever a target, never an input.
    ex.tokens.pop_back();
    if (static_cast<int>(ex.tokens.size()) > max_seq_len)
        throw Error(ErrorCode::sequence_too_long, "regression training sequence of " +
                                                      std::to_string(ex.tokens.size()) + " tokens");
    return ex;
}

std::vector<TrainingExample> sample_training_batch(const TrainConfig& train, int batch_size, const ModelConfig& model,
                                                   Rng& rng, std::vector<std::uint64_t>* task_digests) {
    const TaskConfig& task = train.task;
    std::vector<TrainingExample> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    if (task.family == TaskFamily::classification) {
        const int pairs_per_prompt = (task.shots / task.num_labels) * task.num_labels + 1;
        for (int b = 0; b < batch_size; ++b) {
            const auto t = sample_classification_task(rng, task.num_labels, train.query_pool, model.vocab_size);
            if (task_digests) task_digests->push_back(t.digest());
            std::uniform_int_distribution<std::size_t> pick(0, t.queries.size() - 1);
            auto random_pair = [&] {
                const int q = t.queries[pick(rng)];
                return Demonstration{q, t.label_of(q)};
            };
            DemonstrationSet pairs;
            if (train.demo_sampling == DemoSampling::balanced) {
                pairs = sample_demonstrations(t, task.shots, rng);
                pairs.push_back(random_pair());
            } else {
                for (int i = 0; i < pairs_per_prompt; ++i) pairs.push_back(random_pair());
            }
            batch.push_back(make_classification_example(pairs, model.max_seq_len));
        }
        return batch;
    }
    const auto scheme = NumericTokenScheme::for_vocab(model.vocab_size);
    const auto kind = regression_kind(task.family);
    for (int b = 0; b < batch_size; ++b) {
        const auto t = sample_regression_task(rng, kind, task.input_dim, task.width);
        std::vector<RegressionPair> demos;
        for (int i = 0; i < task.regression_shots; ++i) {
            Vector x = sample_regression_input(rng, task.input_dim);
            const double y = t.evaluate(x);
            demos.push_back({std::move(x), y});
        }
        Vector xq = sample_regression_input(rng, task.input_dim);
        const double yq = t.evaluate(xq);
        batch.push_back(make_regression_example(demos, {std::move(xq), yq}, scheme, model.max_seq_len));
    }
    return batch;
}

TrainResult train_on_stream(const ModelConfig& model, const TrainConfig& train, const ProgressFn& progress) {
    model.validate();
    train.validate();
    TrainResult result{init_parameters(model), {}, {}};
    if (train.steps == 0) return result;

    Rng rng(train.rng_seed);
    AdamState state = AdamState::zeros(result.params);
    std::vector<std::uint64_t> digests;
    result.losses.reserve(static_cast<std::size_t>(train.steps));
    for (int step = 0; step < train.steps; ++step) {
        digests.clear();
        const auto batch = sample_training_batch(train, train.batch_size, model, rng, &digests);
        result.task_digests.insert(digests.begin(), digests.end());
        auto lg = backward(result.params, batch);
        adam_step(result.params, lg.gradient, state, step, train);
        result.losses.push_back(lg.loss);
        if (progress) progress(step, lg.loss);
    }
    return result;
}

std::unordered_set<std::uint64_t> replay_training_tasks(const ModelConfig& model, const TrainConfig& train) {
    std::unordered_set<std::uint64_t> seen;
    if (train.task.family != TaskFamily::classification) return seen;
    Rng rng(train.rng_seed);
    std::vector<std::uint64_t> digests;
    for (int step = 0; step < train.steps; ++step) {
        digests.clear();
        sample_training_batch(train, train.batch_size, model, rng, &digests);
        seen.insert(digests.begin(), digests.end());
    }
    return seen;
}

ClassificationTask sample_heldout_task(Rng& rng, const TaskConfig& task, int vocab_size,
                                       const std::unordered_set<std::uint64_t>& seen) {
    while (true) {
        auto t = sample_classification_task(rng, task.num_labels, task.num_queries, vocab_size);
        if (!seen.contains(t.digest())) return t;
    }
}

}  // namespace tvlab
