#pragma once

// Task-vector extraction: the ridge-regression linear map and the baselines
// it is compared against.

#include <cstdint>
#include <span>
#include <vector>

#include "tvlab/method.hpp"
#include "tvlab/model.hpp"
#include "tvlab/tasks.hpp"

namespace tvlab {

/// Column j of `h` is h_zs(x_j); column j of `y` is h_icl(x_j, Z) - h_zs(x_j).
struct ExtractionBatch {
    Matrix h;
    Matrix y;
    std::vector<int> queries;
    std::uint64_t model_digest = 0;
    std::uint64_t demo_digest = 0;
};

/// Runs the zero-shot and ICL forwards for every query. No labels are used.
ExtractionBatch build_extraction_batch(const Model& model, std::span<const Demonstration> demos,
                                       std::span<const int> queries);

/// Regression analogue: the states are taken at the "y:" position of the
/// zero-shot query block and of the full demonstration prompt. `queries`
/// holds the input indices 0..N-1.
ExtractionBatch build_regression_extraction_batch(const Model& model, std::span<const RegressionPair> demos,
                                                  std::span<const Vector> inputs, const NumericTokenScheme& scheme,
                                                  int reserve_tokens);

/// W* = ridge_solve(H, Y, lambda). The normal-equation residual is recorded
/// in the metadata under "residual".
TaskVectorMethod extract_ltv(const ExtractionBatch& batch, double lambda);
TaskVectorMethod extract_ltv(const Model& model, std::span<const Demonstration> demos,
                             std::span<const int> queries, double lambda);

/// c = mean of the columns of Y.
TaskVectorMethod extract_constant(const ExtractionBatch& batch);
TaskVectorMethod extract_constant(const Model& model, std::span<const Demonstration> demos,
                                  std::span<const int> queries);

/// Captures every layer's last-position state on the prompt Z || probe_query,
/// scores each layer by validation accuracy under replacement, and keeps the
/// best layer (ties to the shallowest).
TaskVectorMethod extract_layer_replace(const Model& model, std::span<const Demonstration> demos, int probe_query,
                                       std::span<const Demonstration> validation, std::span<const int> labels);

struct MlpTrainConfig {
    int epochs = 100;
    double learning_rate = 1e-2;
    int batch_size = 8;
    double warmup_fraction = 0.1;
    int width = 0;  // 0 selects d
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 1;
};

/// Deterministic initial weights: W1 ~ N(0, 2/d), W2 ~ N(0, 1/width).
MlpMap init_mlp_map(int d, int width, std::uint64_t seed);

/// Mean over columns of ||y_j - W2 ReLU(W1 h_j)||^2.
double mlp_map_loss(const MlpMap& map, const Matrix& h, const Matrix& y);

struct MlpGradient {
    double loss;
    Matrix w1;
    Matrix w2;
};

MlpGradient mlp_map_gradient(const MlpMap& map, const Matrix& h, const Matrix& y);

/// Adam on minibatches of columns with warmup + cosine decay. Final training
/// loss is stored in the metadata under "final_loss".
TaskVectorMethod train_mlp_map(const ExtractionBatch& batch, const MlpTrainConfig& config);

/// Logit-space ridge map from the small model's zero-shot hidden state to
/// W_lm^large h_icl^large - W_lm^small h_zs^small. Applies to `small`.
TaskVectorMethod extract_logit_ltv(const Model& large, const Model& small, std::span<const Demonstration> demos,
                                   std::span<const int> queries, double lambda);

}  // namespace tvlab
