#pragma once

#include <span>
#include <vector>

#include "tvlab/method.hpp"
#include "tvlab/model.hpp"
#include "tvlab/tasks.hpp"

namespace tvlab {

/// A greedy label decision over the label set C. `hidden` is the final
/// representation the LM head consumed (h_zs for logit-space maps).
struct Prediction {
    int label;
    ProbabilityVector distribution;  // ordered as the label set
    Vector hidden;
};

/// Next-token distribution renormalised over the label tokens, computed as a
/// softmax of the restricted logits.
ProbabilityVector restricted_distribution(const Vector& logits, std::span<const int> labels);

/// argmax of the distribution; ties go to the lowest label-token id.
int greedy_label(const ProbabilityVector& distribution, std::span<const int> labels);

Prediction zero_shot_predict(const Model& model, int query, std::span<const int> labels);

Prediction icl_predict(const Model& model, std::span<const Demonstration> demos, int query,
                       std::span<const int> labels);

Prediction tv_predict(const Model& model, const TaskVectorMethod& method, int query, std::span<const int> labels);

/// Greedy decoding over the full vocabulary until `stop_token` or `max_new`
/// tokens. The stop token is included in the output when produced.
std::vector<int> greedy_generate(const Model& model, std::span<const int> prompt, int max_new, int stop_token);

/// Greedy decoding with W* h_zs(last position) added to the final hidden
/// state before the LM head at every step.
std::vector<int> tv_generate(const Model& model, const TaskVectorMethod& method, std::span<const int> prompt,
                             int max_new, int stop_token);

}  // namespace tvlab
