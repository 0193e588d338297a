#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "tvlab/model.hpp"
#include "tvlab/tasks.hpp"

namespace tvlab {

enum class TaskFamily { classification, regression_linear, regression_relu };

/// How training prompts draw their demonstrations. `balanced` follows the
/// evaluation rule (floor(k/K) pairs per label); `independent` draws every
/// pair's query uniformly from the task's pool.
enum class DemoSampling { independent, balanced };

std::string to_string(TaskFamily family);
TaskFamily parse_task_family(const std::string& s);
std::string to_string(DemoSampling sampling);
DemoSampling parse_demo_sampling(const std::string& s);
bool is_regression(TaskFamily family);
RegressionKind regression_kind(TaskFamily family);

/// Shape of the synthetic tasks a model is trained and evaluated on.
struct TaskConfig {
    TaskFamily family = TaskFamily::classification;
    int num_labels = 4;    // K
    int num_queries = 4;   // |Q| per held-out classification task
    int shots = 30;        // k; classification demos are floor(k/K)*K
    int input_dim = 2;     // m
    int width = 16;        // r (relu)
    int regression_shots = 4;
};

struct TrainConfig {
    int steps = 20000;
    int batch_size = 32;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double warmup_fraction = 0.05;
    std::uint64_t rng_seed = 1;
    DemoSampling demo_sampling = DemoSampling::independent;
    int query_pool = 8;  // |Q| of training tasks
    TaskConfig task;

    void validate() const;
};

/// Linear warmup over warmup_fraction * total_steps, then cosine decay to zero.
double warmup_cosine_rate(double base_rate, double warmup_fraction, int total_steps, int step_index);

double learning_rate_at(const TrainConfig& config, int step_index);

struct AdamState {
    Parameters first_moment;
    Parameters second_moment;

    static AdamState zeros(const Parameters& like);
};

/// One Adam update in place, with the scheduled rate for `step_index` and
/// bias correction for step_index + 1.
void adam_step(Parameters& params, const Parameters& grads, AdamState& state, int step_index,
               const TrainConfig& config);

/// [BOS, x1, y1, ..., xn, yn] with a target at every query position.
TrainingExample make_classification_example(std::span<const Demonstration> pairs, int max_seq_len);

/// Demonstrations plus the query, each answer followed by a newline; every
/// answer token and its newline is a target.
TrainingExample make_regression_example(std::span<const RegressionPair> demos, const RegressionPair& query,
                                        const NumericTokenScheme& scheme, int max_seq_len);

/// Draws one training batch; classification task digests are appended to
/// `task_digests` when it is non-null. A classification prompt holds
/// floor(k/K)*K + 1 pairs so the query slot of a k-shot prompt is trained too.
std::vector<TrainingExample> sample_training_batch(const TrainConfig& train, int batch_size, const ModelConfig& model,
                                                   Rng& rng, std::vector<std::uint64_t>* task_digests);

struct TrainResult {
    Parameters params;
    std::vector<double> losses;  // one per step
    std::unordered_set<std::uint64_t> task_digests;
};

using ProgressFn = std::function<void(int step, double loss)>;

TrainResult train_on_stream(const ModelConfig& model, const TrainConfig& train, const ProgressFn& progress = {});

/// Re-draws the training stream without touching a model to recover the set
/// of classification task digests seen during training.
std::unordered_set<std::uint64_t> replay_training_tasks(const ModelConfig& model, const TrainConfig& train);

/// Samples a classification task whose digest is not in `seen`.
ClassificationTask sample_heldout_task(Rng& rng, const TaskConfig& task, int vocab_size,
                                       const std::unordered_set<std::uint64_t>& seen);

}  // namespace tvlab
