#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <doctest.h>

#include "tvlab/trainer.hpp"
#include "test_util.hpp"

using namespace tvlab;

namespace {

TrainConfig quick_train(int steps) {
    TrainConfig t;
    t.steps = steps;
    t.batch_size = 4;
    t.learning_rate = 3e-3;
    t.warmup_fraction = 0.1;
    t.task.shots = 8;
    t.task.num_queries = 4;
    t.query_pool = 4;
    return t;
}

double max_abs_difference(const Parameters& a, const Parameters& b) {
    std::vector<const Matrix*> mb;
    Parameters::visit(b, [&](const std::string&, const Matrix& m) { mb.push_back(&m); });
    double worst = 0.0;
    std::size_t i = 0;
    Parameters::visit(a, [&](const std::string&, const Matrix& m) {
        worst = std::max(worst, (m - *mb[i++]).cwiseAbs().maxCoeff());
    });
    return worst;
}

}  // namespace

TEST_CASE("warmup then cosine decay") {
    CHECK(warmup_cosine_rate(1.0, 0.1, 100, 0) == doctest::Approx(0.1));
    CHECK(warmup_cosine_rate(1.0, 0.1, 100, 9) == doctest::Approx(1.0));
    CHECK(warmup_cosine_rate(1.0, 0.1, 100, 10) == doctest::Approx(1.0));
    CHECK(warmup_cosine_rate(1.0, 0.1, 100, 55) == doctest::Approx(0.5));
    CHECK(warmup_cosine_rate(1.0, 0.1, 100, 100) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(warmup_cosine_rate(2.0, 0.0, 10, 0) == doctest::Approx(2.0));
    for (int s = 10; s < 99; ++s)
        CHECK(warmup_cosine_rate(1.0, 0.1, 100, s + 1) <= warmup_cosine_rate(1.0, 0.1, 100, s));
}

TEST_CASE("adam_step: zero rate, descent and determinism") {
    const ModelConfig c = testutil::tiny_config();
    const Parameters p = testutil::scrambled_parameters(c, 3, 0.3);
    TrainConfig t = quick_train(10);
    Rng rng(4);
    const auto batch = sample_training_batch(t, 3, c, rng, nullptr);
    const LossAndGradient lg = backward(p, batch);

    TrainConfig frozen = t;
    frozen.learning_rate = 0.0;
    Parameters same = p;
    AdamState s0 = AdamState::zeros(p);
    adam_step(same, lg.gradient, s0, 0, frozen);
    CHECK(max_abs_difference(same, p) == 0.0);

    TrainConfig tiny = t;
    tiny.learning_rate = 1e-4;
    tiny.warmup_fraction = 0.0;
    Parameters stepped = p;
    AdamState s1 = AdamState::zeros(p);
    adam_step(stepped, lg.gradient, s1, 0, tiny);
    CHECK(batch_loss(stepped, batch) < lg.loss);

    Parameters again = p;
    AdamState s2 = AdamState::zeros(p);
    adam_step(again, lg.gradient, s2, 0, tiny);
    CHECK(max_abs_difference(again, stepped) == 0.0);
}

TEST_CASE("adam_step: shape mismatch") {
    const Parameters p = init_parameters(testutil::tiny_config());
    Parameters wrong = init_parameters(testutil::tiny_config(3));
    AdamState s = AdamState::zeros(p);
    Parameters target = p;
    testutil::check_error(ErrorCode::shape_mismatch, [&] { adam_step(target, wrong, s, 0, quick_train(1)); });
}

TEST_CASE("classification examples carry a target at every query position") {
    const DemonstrationSet pairs = {{7, 1}, {8, 2}, {9, 1}};
    const TrainingExample ex = make_classification_example(pairs, 128);
    CHECK(ex.tokens == std::vector<int>{kBosToken, 7, 1, 8, 2, 9, 1});
    REQUIRE(ex.targets.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(ex.targets[i].position == static_cast<int>(2 * i + 1));
        CHECK(ex.tokens[ex.targets[i].position + 1] == ex.targets[i].label);
    }
}

TEST_CASE("regression examples target the answer tokens and newline") {
    const auto s = NumericTokenScheme::for_vocab(64);
    Vector x(2);
    x << 0.5, -1.0;
    const std::vector<RegressionPair> demos = {{x, 1.25}};
    const TrainingExample ex = make_regression_example(demos, {x, -2.5}, s, 128);
    for (const auto& t : ex.targets) {
        const int next = ex.tokens[t.position + 1];
        CHECK(next == t.label);
        CHECK((s.is_digit(next) || next == s.minus || next == s.point || next == s.newline));
    }
    // "1.25\n" and "-2.50\n".
    CHECK(ex.targets.size() == 5 + 6);
}

TEST_CASE("training prompts: balanced and independent demonstrations") {
    const ModelConfig c = testutil::tiny_config();
    TrainConfig t = quick_train(1);
    t.task.shots = 10;
    t.query_pool = 6;
    for (auto sampling : {DemoSampling::balanced, DemoSampling::independent}) {
        t.demo_sampling = sampling;
        Rng rng(5);
        std::vector<std::uint64_t> digests;
        const auto batch = sample_training_batch(t, 20, c, rng, &digests);
        REQUIRE(batch.size() == 20);
        CHECK(digests.size() == 20);
        for (const auto& ex : batch) {
            // floor(10/4)*4 demonstrations plus the trained query slot.
            CHECK(ex.tokens.size() == 1 + 2 * 9);
            CHECK(ex.targets.size() == 9);
            std::map<int, int> counts;
            std::set<int> queries;
            for (const auto& tgt : ex.targets) {
                ++counts[tgt.label];
                queries.insert(ex.tokens[tgt.position]);
            }
            CHECK(queries.size() <= 6);
            if (sampling == DemoSampling::balanced) {
                int at_least_two = 0;
                for (const auto& [label, n] : counts) at_least_two += n >= 2 ? 1 : 0;
                CHECK(at_least_two == 4);
            }
        }
    }
    CHECK(parse_demo_sampling("balanced") == DemoSampling::balanced);
    CHECK(to_string(DemoSampling::independent) == "independent");
    testutil::check_error(ErrorCode::config_error, [&] { parse_demo_sampling("uniform"); });
    t.query_pool = 3;
    testutil::check_error(ErrorCode::invalid_config, [&] { t.validate(); });
}

TEST_CASE("train_on_stream: zero steps, determinism and descent") {
    const ModelConfig c = testutil::tiny_config();
    TrainConfig none = quick_train(0);
    const TrainResult untouched = train_on_stream(c, none);
    CHECK(max_abs_difference(untouched.params, init_parameters(c)) == 0.0);
    CHECK(untouched.losses.empty());

    const TrainConfig t = quick_train(300);
    const TrainResult a = train_on_stream(c, t);
    const TrainResult b = train_on_stream(c, t);
    CHECK(max_abs_difference(a.params, b.params) == 0.0);
    REQUIRE(a.losses.size() == 300);
    for (double l : a.losses) CHECK(std::isfinite(l));
    const double first = std::accumulate(a.losses.begin(), a.losses.begin() + 100, 0.0) / 100.0;
    const double last = std::accumulate(a.losses.end() - 100, a.losses.end(), 0.0) / 100.0;
    CHECK(last < first);
}

TEST_CASE("replayed training digests match the stream and held-out tasks avoid them") {
    const ModelConfig c = testutil::tiny_config();
    const TrainConfig t = quick_train(20);
    const TrainResult r = train_on_stream(c, t);
    const auto replayed = replay_training_tasks(c, t);
    CHECK(replayed == r.task_digests);
    CHECK(replayed.size() > 0);
    Rng rng(99);
    for (int i = 0; i < 50; ++i) CHECK_FALSE(replayed.contains(sample_heldout_task(rng, t.task, 40, replayed).digest()));
}

TEST_CASE("TrainConfig validation") {
    TrainConfig t;
    t.batch_size = 0;
    testutil::check_error(ErrorCode::invalid_config, [&] { t.validate(); });
    t = TrainConfig{};
    t.beta1 = 1.0;
    testutil::check_error(ErrorCode::invalid_config, [&] { t.validate(); });
    t = TrainConfig{};
    t.warmup_fraction = 1.0;
    testutil::check_error(ErrorCode::invalid_config, [&] { t.validate(); });
    CHECK(parse_task_family("regression-relu") == TaskFamily::regression_relu);
    CHECK(to_string(TaskFamily::regression_linear) == "regression-linear");
    testutil::check_error(ErrorCode::config_error, [&] { parse_task_family("vision"); });
}
