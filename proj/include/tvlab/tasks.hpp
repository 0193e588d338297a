#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tvlab/linalg.hpp"

namespace tvlab {

using Rng = std::mt19937_64;

inline constexpr int kBosToken = 0;

/// Reserved ids for the numeric prompt format, packed at the top of the
/// vocabulary. BOS is id 0; label tokens occupy 1..K; everything between the
/// labels and the scheme block is available for classification queries.
struct NumericTokenScheme {
    int digit0 = 0;  // digits are digit0 .. digit0 + 9
    int minus = 0;
    int point = 0;
    int lbracket = 0;
    int rbracket = 0;
    int comma = 0;
    int newline = 0;
    int x_marker = 0;
    int y_marker = 0;
    int separator = 0;
    int bos = kBosToken;

    static constexpr int kReservedCount = 19;  // scheme tokens, excluding BOS

    static NumericTokenScheme for_vocab(int vocab_size);

    int first_reserved() const { return digit0; }
    bool is_reserved(int token) const { return token == bos || token >= first_reserved(); }
    bool is_digit(int token) const { return token >= digit0 && token < digit0 + 10; }
};

struct ClassificationTask {
    std::vector<int> labels;   // ordered label tokens C (ids 1..K)
    std::vector<int> queries;  // ordered query tokens Q, disjoint from C
    std::vector<int> mapping;  // mapping[i] = index into labels for queries[i]

    int num_labels() const { return static_cast<int>(labels.size()); }
    int label_of(int query_token) const;
    std::vector<int> preimage(int label_index) const;
    std::uint64_t digest() const;
};

struct Demonstration {
    int query;
    int label;
};

using DemonstrationSet = std::vector<Demonstration>;

std::uint64_t digest(const DemonstrationSet& demos);

/// Query tokens come from the range (K, first reserved scheme id).
ClassificationTask sample_classification_task(Rng& rng, int num_labels, int num_queries, int vocab_size);

/// floor(k / K) demonstrations per label, queries drawn with replacement from
/// each label's preimage, then shuffled.
DemonstrationSet sample_demonstrations(const ClassificationTask& task, int k, Rng& rng);

/// [BOS, x1, y1, ..., xk, yk, x]; with no demonstrations, [BOS, x].
std::vector<int> encode_classification_prompt(std::span<const Demonstration> demos, int query, int max_seq_len);

enum class RegressionKind { linear, relu };

std::string to_string(RegressionKind kind);
RegressionKind parse_regression_kind(const std::string& s);

struct RegressionTask {
    RegressionKind kind = RegressionKind::linear;
    int input_dim = 0;
    int width = 0;  // relu only
    Vector w;       // linear
    Matrix v;       // relu, width x input_dim
    Vector alpha;   // relu, width

    double evaluate(const Vector& x) const;
};

/// linear: w ~ N(0, I). relu: V ~ N(0, I), alpha ~ N(0, I / r).
RegressionTask sample_regression_task(Rng& rng, RegressionKind kind, int input_dim, int width);

Vector sample_regression_input(Rng& rng, int input_dim);

struct RegressionPair {
    Vector x;
    double y;
};

std::uint64_t digest(std::span<const RegressionPair> demos);

/// Clamps to [-99.99, 99.99] and rounds half away from zero to two decimals.
double round_fixed(double value);

/// Tokens of the fixed-point rendering: optional '-', one or two integer
/// digits, '.', two fractional digits.
std::vector<int> encode_number(double value, const NumericTokenScheme& scheme);

/// Reads an optional sign, digits and an optional point with digits, stopping
/// at the first token that cannot continue the number. Throws
/// malformed_number when no digit is read.
double decode_number(std::span<const int> tokens, const NumericTokenScheme& scheme);

struct RegressionPrompt {
    std::vector<int> tokens;
    int clamped_values = 0;  // numbers outside +-99.99 that were clamped
};

/// [BOS] then per demonstration "x: [v1, ..., vm]\ny: y\n" + separator, then
/// the query block "x: [...]\ny:" so the model continues with the answer.
RegressionPrompt encode_regression_prompt(std::span<const RegressionPair> demos, const Vector& query,
                                          const NumericTokenScheme& scheme, int max_seq_len);

}  // namespace tvlab
