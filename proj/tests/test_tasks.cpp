#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include <doctest.h>

#include "tvlab/tasks.hpp"
#include "test_util.hpp"

using namespace tvlab;

namespace {

std::vector<int> render(const std::string& text, const NumericTokenScheme& s) {
    std::vector<int> out;
    for (char c : text) {
        if (c >= '0' && c <= '9') out.push_back(s.digit0 + (c - '0'));
        else if (c == '-') out.push_back(s.minus);
        else if (c == '.') out.push_back(s.point);
    }
    return out;
}

}  // namespace

TEST_CASE("numeric token scheme occupies distinct ids at the top of the vocabulary") {
    const auto s = NumericTokenScheme::for_vocab(64);
    std::set<int> ids = {s.minus, s.point, s.lbracket, s.rbracket, s.comma, s.newline, s.x_marker, s.y_marker,
                         s.separator};
    for (int d = 0; d < 10; ++d) ids.insert(s.digit0 + d);
    CHECK(ids.size() == NumericTokenScheme::kReservedCount);
    CHECK(*ids.rbegin() < 64);
    CHECK(*ids.begin() == 64 - NumericTokenScheme::kReservedCount);
    CHECK_FALSE(ids.contains(kBosToken));
}

TEST_CASE("sample_classification_task: surjective, disjoint and deterministic") {
    Rng rng(1);
    const auto t = sample_classification_task(rng, 2, 2, 64);
    CHECK(t.labels == std::vector<int>{1, 2});
    std::vector<int> sorted = t.mapping;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1});

    Rng a(42), b(42);
    CHECK(sample_classification_task(a, 4, 8, 64).digest() == sample_classification_task(b, 4, 8, 64).digest());

    const auto scheme = NumericTokenScheme::for_vocab(64);
    Rng r(7);
    for (int trial = 0; trial < 200; ++trial) {
        const auto task = sample_classification_task(r, 4, 16, 64);
        for (int l = 0; l < 4; ++l) CHECK_FALSE(task.preimage(l).empty());
        for (int q : task.queries) {
            CHECK(q > 4);
            CHECK_FALSE(scheme.is_reserved(q));
            CHECK(std::find(task.labels.begin(), task.labels.end(), q) == task.labels.end());
        }
        CHECK(std::set<int>(task.queries.begin(), task.queries.end()).size() == 16);
    }
}

TEST_CASE("sample_classification_task: vocabulary exhaustion") {
    Rng rng(1);
    testutil::check_error(ErrorCode::vocab_exhausted, [&] { sample_classification_task(rng, 4, 60, 64); });
}

TEST_CASE("sample_demonstrations: seven per label for K=4, k=30") {
    Rng rng(3);
    const auto task = sample_classification_task(rng, 4, 8, 64);
    const auto demos = sample_demonstrations(task, 30, rng);
    REQUIRE(demos.size() == 28);
    std::map<int, int> counts;
    for (const auto& d : demos) {
        ++counts[d.label];
        CHECK(task.label_of(d.query) == d.label);
    }
    for (int label = 1; label <= 4; ++label) CHECK(counts[label] == 7);
}

TEST_CASE("sample_demonstrations: floor rule and boundary") {
    Rng rng(4);
    const auto two = sample_classification_task(rng, 2, 6, 64);
    const auto demos = sample_demonstrations(two, 30, rng);
    CHECK(demos.size() == 30);
    CHECK(std::count_if(demos.begin(), demos.end(), [](const Demonstration& d) { return d.label == 1; }) == 15);

    const auto five = sample_classification_task(rng, 5, 5, 64);
    testutil::check_error(ErrorCode::too_few_shots, [&] { sample_demonstrations(five, 4, rng); });
}

TEST_CASE("sample_demonstrations: balanced for every K and k") {
    Rng rng(5);
    for (int k_labels = 2; k_labels <= 5; ++k_labels) {
        for (int k = k_labels; k <= 60; ++k) {
            const auto task = sample_classification_task(rng, k_labels, k_labels + 3, 64);
            const auto demos = sample_demonstrations(task, k, rng);
            std::map<int, int> counts;
            for (const auto& d : demos) ++counts[d.label];
            CHECK(static_cast<int>(counts.size()) == k_labels);
            for (const auto& [label, n] : counts) CHECK(n == k / k_labels);
        }
    }
}

TEST_CASE("encode_classification_prompt: layout and positional decode") {
    CHECK(encode_classification_prompt({}, 9, 128) == std::vector<int>{kBosToken, 9});
    const DemonstrationSet two = {{7, 1}, {8, 2}};
    const auto prompt = encode_classification_prompt(two, 9, 128);
    CHECK(prompt == std::vector<int>{kBosToken, 7, 1, 8, 2, 9});

    Rng rng(6);
    const auto task = sample_classification_task(rng, 4, 8, 64);
    const auto demos = sample_demonstrations(task, 30, rng);
    const auto tokens = encode_classification_prompt(demos, task.queries[0], 128);
    for (std::size_t i = 0; i < demos.size(); ++i) {
        CHECK(tokens[2 * i + 1] == demos[i].query);
        CHECK(tokens[2 * i + 2] == demos[i].label);
    }
    testutil::check_error(ErrorCode::sequence_too_long, [&] { encode_classification_prompt(demos, 9, 10); });
}

TEST_CASE("regression tasks evaluate their definition") {
    Rng rng(8);
    const auto linear = sample_regression_task(rng, RegressionKind::linear, 3, 0);
    CHECK(linear.evaluate(Vector::Zero(3)) == 0.0);

    RegressionTask relu;
    relu.kind = RegressionKind::relu;
    relu.input_dim = 3;
    relu.width = 3;
    relu.v = Matrix::Identity(3, 3);
    relu.alpha = Vector::Ones(3);
    Vector x(3);
    x << 1.5, -2.0, 0.25;
    CHECK(relu.evaluate(x) == doctest::Approx(1.75));

    Rng a(9), b(9);
    const auto ta = sample_regression_task(a, RegressionKind::relu, 2, 16);
    const auto tb = sample_regression_task(b, RegressionKind::relu, 2, 16);
    CHECK(ta.v == tb.v);
    CHECK(ta.alpha == tb.alpha);
}

TEST_CASE("encode_number and decode_number: reference values") {
    const auto s = NumericTokenScheme::for_vocab(64);
    CHECK(encode_number(0.0, s) == render("0.00", s));
    CHECK(encode_number(-3.456, s) == render("-3.46", s));
    CHECK(encode_number(0.125, s) == render("0.13", s));
    CHECK(encode_number(-0.125, s) == render("-0.13", s));
    CHECK(encode_number(1234.0, s) == render("99.99", s));
    CHECK(decode_number(render("12.50", s), s) == 12.5);
    CHECK(decode_number(render("-0.25", s), s) == -0.25);

    std::vector<int> trailing = render("7.5", s);
    trailing.push_back(s.newline);
    trailing.push_back(s.digit0 + 3);
    CHECK(decode_number(trailing, s) == 7.5);

    testutil::check_error(ErrorCode::malformed_number, [&] { decode_number(std::vector<int>{s.newline}, s); });
    testutil::check_error(ErrorCode::malformed_number, [&] { decode_number(render("-", s), s); });
}

TEST_CASE("number round trip over a dense grid") {
    const auto s = NumericTokenScheme::for_vocab(64);
    for (int i = -11000; i <= 11000; i += 7) {
        const double v = i / 100.0 + 0.003;
        CHECK(decode_number(encode_number(v, s), s) == round_fixed(v));
    }
    Rng rng(10);
    std::uniform_int_distribution<int> cents(-9999, 9999);
    for (int i = 0; i < 1000; ++i) {
        const double v = cents(rng) / 100.0;
        CHECK(decode_number(encode_number(v, s), s) == v);
    }
}

TEST_CASE("encode_regression_prompt: query block only and full layout") {
    const auto s = NumericTokenScheme::for_vocab(64);
    Vector q(2);
    q << 1.0, -0.5;
    const auto zero = encode_regression_prompt({}, q, s, 128);
    std::vector<int> expected = {kBosToken, s.x_marker, s.lbracket};
    for (int t : render("1.00", s)) expected.push_back(t);
    expected.push_back(s.comma);
    for (int t : render("-0.50", s)) expected.push_back(t);
    expected.push_back(s.rbracket);
    expected.push_back(s.newline);
    expected.push_back(s.y_marker);
    CHECK(zero.tokens == expected);
    CHECK(zero.clamped_values == 0);

    const std::vector<RegressionPair> demos = {{q, 150.0}};
    const auto one = encode_regression_prompt(demos, q, s, 128);
    CHECK(one.clamped_values == 1);
    CHECK(one.tokens.size() > zero.tokens.size());
    CHECK(std::count(one.tokens.begin(), one.tokens.end(), s.separator) == 1);
    CHECK(std::equal(expected.begin() + 1, expected.end(), one.tokens.end() - (expected.size() - 1)));
    testutil::check_error(ErrorCode::sequence_too_long, [&] { encode_regression_prompt(demos, q, s, 12); });
}

TEST_CASE("demonstration digests distinguish order and content") {
    const DemonstrationSet a = {{7, 1}, {8, 2}};
    const DemonstrationSet b = {{8, 2}, {7, 1}};
    CHECK(digest(a) == digest(DemonstrationSet(a)));
    CHECK(digest(a) != digest(b));
}
