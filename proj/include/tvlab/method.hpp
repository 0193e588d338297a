#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tvlab/linalg.hpp"

namespace tvlab {

class Model;

/// v(x) = W* h_zs(x), added to the final hidden state.
struct LtvLinear {
    Matrix w_star;  // d x d
    double lambda = 5.0;
    int num_queries = 0;
};

/// v(x) = c for every query.
struct ConstantMap {
    Vector c;
};

/// Overwrites the output of hidden layer `layer` (1..n_layers) at the last
/// position with `vector`.
struct LayerReplace {
    int layer = 1;
    Vector vector;
    std::vector<double> layer_accuracy;  // validation accuracy for layers 1..n_layers
};

/// v(x) = W2 ReLU(W1 h_zs(x)).
struct MlpMap {
    Matrix w1;  // width x d
    Matrix w2;  // d x width
};

/// Corrected logits W_lm h_zs + W~ h_zs of the model the map was fitted for.
struct LogitLtv {
    Matrix w_tilde;  // vocab x d_small
    double lambda = 5.0;
    int num_queries = 0;
};

using MethodBody = std::variant<LtvLinear, ConstantMap, LayerReplace, MlpMap, LogitLtv>;

/// Also the payload-kind byte of a saved method.
enum class MethodKind : std::uint8_t { ltv = 1, constant = 2, layer_replace = 3, mlp = 4, logit_ltv = 5 };

std::string to_string(MethodKind kind);

struct TaskVectorMethod {
    MethodBody body;
    std::uint64_t model_digest = 0;  // model the method may be applied to
    std::uint64_t demo_digest = 0;   // demonstrations it was extracted from
    std::map<std::string, std::string> metadata;

    MethodKind kind() const { return static_cast<MethodKind>(body.index() + 1); }

    /// Throws wrong_model when `model` is not the one this method was built for.
    void check_model(const Model& model) const;
};

/// The additive hidden-space vector v(x) for methods that define one
/// (linear, constant, MLP); nullopt for layer replacement and logit-space maps.
std::optional<Vector> additive_vector(const TaskVectorMethod& method, const Vector& h_zs);

}  // namespace tvlab
