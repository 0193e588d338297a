#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tvlab/linalg.hpp"

namespace tvlab {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 64;
    int max_seq_len = 128;
    std::uint64_t rng_seed = 1;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }

    static ModelConfig small();
    static ModelConfig large();

    bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
    Matrix ln1_gain, ln1_bias;  // 1 x d
    Matrix query, key, value, output;  // d x d, applied as X * W
    Matrix ln2_gain, ln2_bias;  // 1 x d
    Matrix ff_in;   // d x d_ff
    Matrix ff_out;  // d_ff x d
};

/// All trainable tensors. Row vectors (layer-norm gains and biases) are
/// stored as 1 x d matrices so every tensor has the same type.
struct Parameters {
    ModelConfig config;
    Matrix token_embedding;       // vocab x d
    Matrix positional_embedding;  // max_seq_len x d
    std::vector<LayerParams> layers;
    Matrix final_gain, final_bias;  // 1 x d
    Matrix lm_head;                 // vocab x d

    /// Calls f(name, tensor) for every tensor in the canonical order used by
    /// checkpoints, the optimiser and the model digest.
    template <class Self, class F>
    static void visit(Self& p, F&& f) {
        f(std::string("token_embedding"), p.token_embedding);
        f(std::string("positional_embedding"), p.positional_embedding);
        for (std::size_t i = 0; i < p.layers.size(); ++i) {
            auto& l = p.layers[i];
            const std::string prefix = "layers." + std::to_string(i) + ".";
            f(prefix + "ln1.gain", l.ln1_gain);
            f(prefix + "ln1.bias", l.ln1_bias);
            f(prefix + "attn.query", l.query);
            f(prefix + "attn.key", l.key);
            f(prefix + "attn.value", l.value);
            f(prefix + "attn.output", l.output);
            f(prefix + "ln2.gain", l.ln2_gain);
            f(prefix + "ln2.bias", l.ln2_bias);
            f(prefix + "ff.in", l.ff_in);
            f(prefix + "ff.out", l.ff_out);
        }
        f(std::string("final_norm.gain"), p.final_gain);
        f(std::string("final_norm.bias"), p.final_bias);
        f(std::string("lm_head"), p.lm_head);
    }
};

/// Gaussian(0, 0.02) weights, unit gains, zero biases; deterministic in the seed.
Parameters init_parameters(const ModelConfig& config);

/// Same shapes as `like`, every entry zero.
Parameters zeros_like(const Parameters& like);

std::uint64_t parameter_count(const Parameters& p);

/// 64-bit FNV-1a over the model config and the raw bytes of every tensor.
std::uint64_t digest(const Parameters& p);

/// Immutable parameter snapshot with its digest computed once. Inference,
/// extraction and evaluation all take a Model.
class Model {
public:
    explicit Model(Parameters params);

    const Parameters& params() const noexcept { return params_; }
    const ModelConfig& config() const noexcept { return params_.config; }
    std::uint64_t digest() const noexcept { return digest_; }

private:
    Parameters params_;
    std::uint64_t digest_;
};

enum class InjectionMode { none, add_final, replace_at_layer };

/// add_final adds `vector` to the final hidden state of the last position.
/// replace_at_layer overwrites the output of block `layer_index` (0-based,
/// < n_layers) at the last position before the remaining blocks run.
struct InjectionSpec {
    InjectionMode mode = InjectionMode::none;
    Vector vector;
    int layer_index = 0;

    static InjectionSpec none() { return {}; }
    static InjectionSpec add_final(Vector v) { return {InjectionMode::add_final, std::move(v), 0}; }
    static InjectionSpec replace_at_layer(int layer_index, Vector v) {
        return {InjectionMode::replace_at_layer, std::move(v), layer_index};
    }
};

/// hidden_by_layer[0] is the embedding output, hidden_by_layer[l] the output
/// of block l. The last entry (l = n_layers) is taken after the final layer
/// norm: it is the representation the LM head consumes, so
/// logits.row(t) == lm_head * hidden_by_layer[L].row(t).
struct ForwardTrace {
    int seq_len = 0;
    std::vector<Matrix> hidden_by_layer;  // n_layers + 1 entries, each seq_len x d
    Matrix logits;                        // seq_len x vocab

    Vector hidden(int layer, int position) const { return hidden_by_layer.at(layer).row(position).transpose(); }
    Vector final_hidden(int position) const { return hidden_by_layer.back().row(position).transpose(); }
    Vector last_hidden() const { return final_hidden(seq_len - 1); }
    Vector last_logits() const { return logits.row(seq_len - 1).transpose(); }
};

ForwardTrace forward(const Parameters& params, std::span<const int> tokens,
                     const InjectionSpec& injection = InjectionSpec::none());

/// Hidden state of `layer` (0..n_layers) at the last position.
Vector capture_hidden(const Parameters& params, std::span<const int> tokens, int layer);

struct TargetToken {
    int position;  // logits at this position predict `label`
    int label;
};

struct TrainingExample {
    std::vector<int> tokens;
    std::vector<TargetToken> targets;
};

struct LossAndGradient {
    double loss = 0.0;  // mean cross-entropy over all targets in the batch
    Parameters gradient;
};

/// Mean next-token cross-entropy over every target of every example, and its
/// gradient with respect to all parameters.
LossAndGradient backward(const Parameters& params, std::span<const TrainingExample> batch);

/// Loss only (no gradient); used by finite-difference checks and training diagnostics.
double batch_loss(const Parameters& params, std::span<const TrainingExample> batch);

}  // namespace tvlab
