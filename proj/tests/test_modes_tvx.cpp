#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <doctest.h>

#include "tvlab/modes.hpp"
#include "tvlab/tvx.hpp"
#include "test_util.hpp"

using namespace tvlab;

namespace {

struct Fixture {
    ModelConfig config = testutil::tiny_config();
    Model model{testutil::scrambled_parameters(config, 21, 0.4)};
    std::vector<int> labels = {1, 2, 3, 4};
    ClassificationTask task;
    DemonstrationSet demos;

    Fixture() {
        Rng rng(22);
        task = sample_classification_task(rng, 4, 8, config.vocab_size);
        demos = sample_demonstrations(task, 12, rng);
    }
};

TaskVectorMethod ltv_of(const Model& m, Matrix w) {
    return TaskVectorMethod{LtvLinear{std::move(w), 1.0, 0}, m.digest(), 0, {}};
}

TaskVectorMethod constant_of(const Model& m, Vector c) {
    return TaskVectorMethod{ConstantMap{std::move(c)}, m.digest(), 0, {}};
}

}  // namespace

TEST_CASE("restricted_distribution: reference values") {
    Vector logits(4);
    logits << 0, 0, 5, 5;
    const std::vector<int> first_two = {0, 1};
    const auto p = restricted_distribution(logits, first_two);
    CHECK(p[0] == doctest::Approx(0.5));
    CHECK(p[1] == doctest::Approx(0.5));

    Vector z(3);
    z << std::log(2.0), std::log(1.0), std::log(7.0);
    const auto q = restricted_distribution(z, first_two);
    CHECK(q[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(q[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    const std::vector<int> all = {0, 1, 2};
    CHECK((restricted_distribution(z, all).values() - softmax(z).values()).norm() < 1e-15);

    testutil::check_error(ErrorCode::empty_label_set, [&] { restricted_distribution(z, std::vector<int>{}); });
    testutil::check_error(ErrorCode::token_out_of_range, [&] { restricted_distribution(z, std::vector<int>{0, 3}); });
}

TEST_CASE("greedy_label: shift invariance and ties to the lowest id") {
    const std::vector<int> labels = {3, 1, 2};
    Vector logits(5);
    logits << 0.1, 0.7, -0.2, 0.7, 0.0;
    const auto p = restricted_distribution(logits, labels);
    CHECK(greedy_label(p, labels) == 1);
    const Vector shifted = (logits.array() + 3.7).matrix();
    CHECK(greedy_label(restricted_distribution(shifted, labels), labels) == 1);
}

TEST_CASE("symmetric model predicts uniformly over the label set") {
    const ModelConfig c = testutil::tiny_config();
    Parameters p = zeros_like(init_parameters(c));
    p.token_embedding = init_parameters(c).token_embedding;
    p.positional_embedding = init_parameters(c).positional_embedding;
    const Model m(p);
    const std::vector<int> labels = {1, 2, 3, 4};
    const auto pred = zero_shot_predict(m, 9, labels);
    for (int i = 0; i < 4; ++i) CHECK(pred.distribution[i] == doctest::Approx(0.25));
}

TEST_CASE("icl_predict with no demonstrations equals zero-shot") {
    Fixture f;
    const auto zs = zero_shot_predict(f.model, f.task.queries[0], f.labels);
    const auto icl = icl_predict(f.model, {}, f.task.queries[0], f.labels);
    CHECK((zs.distribution.values() - icl.distribution.values()).norm() == 0.0);
    CHECK(zs.label == icl.label);
}

TEST_CASE("icl_predict is well formed for both demonstration orders") {
    Fixture f;
    DemonstrationSet reversed(f.demos.rbegin(), f.demos.rend());
    const auto a = icl_predict(f.model, f.demos, f.task.queries[1], f.labels);
    const auto b = icl_predict(f.model, reversed, f.task.queries[1], f.labels);
    CHECK(a.distribution.values().sum() == doctest::Approx(1.0));
    CHECK(b.distribution.values().sum() == doctest::Approx(1.0));
    CHECK((a.hidden - b.hidden).norm() > 0.0);
}

TEST_CASE("tv_predict: zero map and exact compensation") {
    Fixture f;
    const int d = f.config.d_model;
    const int q = f.task.queries[2];
    const auto zs = zero_shot_predict(f.model, q, f.labels);
    const auto zero = tv_predict(f.model, ltv_of(f.model, Matrix::Zero(d, d)), q, f.labels);
    CHECK((zero.distribution.values() - zs.distribution.values()).norm() < 1e-15);

    const auto icl = icl_predict(f.model, f.demos, q, f.labels);
    const auto exact = tv_predict(f.model, constant_of(f.model, icl.hidden - zs.hidden), q, f.labels);
    CHECK((exact.distribution.values() - icl.distribution.values()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("tv_predict refuses a method built for another model") {
    Fixture f;
    const Model other(init_parameters(testutil::tiny_config(2, 99)));
    const auto method = ltv_of(other, Matrix::Zero(f.config.d_model, f.config.d_model));
    testutil::check_error(ErrorCode::wrong_model, [&] { tv_predict(f.model, method, f.task.queries[0], f.labels); });
}

TEST_CASE("generation: zero map, zero budget and stop token") {
    Fixture f;
    const int d = f.config.d_model;
    const std::vector<int> prompt = {0, 7, 8, 9};
    CHECK(greedy_generate(f.model, prompt, 0, 3).empty());
    const auto plain = greedy_generate(f.model, prompt, 6, -1);
    CHECK(plain.size() == 6);
    CHECK(tv_generate(f.model, ltv_of(f.model, Matrix::Zero(d, d)), prompt, 6, -1) == plain);
    const auto stopped = greedy_generate(f.model, prompt, 6, plain[0]);
    CHECK(stopped == std::vector<int>{plain[0]});
    testutil::check_error(ErrorCode::sequence_too_long, [&] { greedy_generate(f.model, prompt, 100, -1); });
}

TEST_CASE("extraction batch: duplicates, recomputation and degenerate models") {
    Fixture f;
    const std::vector<int> queries = {f.task.queries[0], f.task.queries[1], f.task.queries[0]};
    const auto batch = build_extraction_batch(f.model, f.demos, queries);
    CHECK(batch.h.cols() == 3);
    CHECK((batch.h.col(0) - batch.h.col(2)).norm() == 0.0);
    CHECK((batch.y.col(0) - batch.y.col(2)).norm() == 0.0);
    const Vector zs = capture_hidden(f.model.params(), encode_classification_prompt({}, queries[1], 128), 2);
    const Vector icl = capture_hidden(f.model.params(),
                                      encode_classification_prompt(f.demos, queries[1], f.config.max_seq_len), 2);
    CHECK((batch.h.col(1) - zs).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((batch.y.col(1) - (icl - zs)).cwiseAbs().maxCoeff() <= 1e-12);

    // With zero value maps and no positional signal, earlier tokens cannot
    // reach the last position, so ICL and zero-shot states coincide.
    Parameters blind = f.model.params();
    blind.positional_embedding.setZero();
    for (auto& l : blind.layers) l.value.setZero();
    const Model degenerate(blind);
    CHECK(build_extraction_batch(degenerate, f.demos, queries).y.norm() < 1e-12);
    testutil::check_error(ErrorCode::empty_queries, [&] { build_extraction_batch(f.model, f.demos, {}); });
}

TEST_CASE("extract_ltv: recovers a planted linear shift") {
    std::mt19937_64 rng(30);
    const int d = 6;
    ExtractionBatch batch;
    batch.h = testutil::gaussian(d, 4 * d, rng);
    const Matrix a = testutil::gaussian(d, d, rng, 0.3);
    batch.y = a * batch.h;  // h_icl = (I + A) h_zs
    const auto method = extract_ltv(batch, 1e-6);
    const auto& w = std::get<LtvLinear>(method.body).w_star;
    CHECK((w - a).norm() / a.norm() < 1e-3);
    CHECK(std::stod(method.metadata.at("residual")) <= 1e-7);

    const auto shrunk = extract_ltv(batch, 1e12);
    CHECK(std::get<LtvLinear>(shrunk.body).w_star.norm() < 1e-6);

    batch.y.setZero();
    CHECK(std::get<LtvLinear>(extract_ltv(batch, 1.0).body).w_star.norm() == 0.0);
    testutil::check_error(ErrorCode::non_positive_lambda, [&] { extract_ltv(batch, 0.0); });
}

TEST_CASE("extract_constant: mean of the shifts") {
    ExtractionBatch batch;
    batch.h = Matrix::Zero(2, 2);
    batch.y.resize(2, 2);
    batch.y << 1, 3, 0, 2;
    const Vector c = std::get<ConstantMap>(extract_constant(batch).body).c;
    CHECK(c(0) == 2.0);
    CHECK(c(1) == 1.0);

    ExtractionBatch one;
    one.h = Matrix::Zero(2, 1);
    one.y = Matrix::Constant(2, 1, 0.37);
    CHECK((std::get<ConstantMap>(extract_constant(one).body).c - one.y.col(0)).norm() == 0.0);

    std::mt19937_64 rng(31);
    ExtractionBatch many;
    many.h = Matrix::Zero(5, 40);
    many.y = testutil::gaussian(5, 40, rng);
    std::vector<int> order(40);
    for (int i = 0; i < 40; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    Vector brute = Vector::Zero(5);
    for (int i : order) brute += many.y.col(i);
    brute /= 40.0;
    CHECK((std::get<ConstantMap>(extract_constant(many).body).c - brute).cwiseAbs().maxCoeff() < 1e-12);

    ExtractionBatch empty;
    empty.h = Matrix::Zero(2, 0);
    empty.y = Matrix::Zero(2, 0);
    testutil::check_error(ErrorCode::empty_queries, [&] { extract_constant(empty); });
}

TEST_CASE("extract_layer_replace: layer sweep") {
    Fixture f;
    std::vector<Demonstration> validation;
    for (int q : f.task.queries) validation.push_back({q, f.task.label_of(q)});
    const auto method = extract_layer_replace(f.model, f.demos, f.task.queries[0], validation, f.labels);
    const auto& lr = std::get<LayerReplace>(method.body);
    REQUIRE(lr.layer_accuracy.size() == 2);
    const double best = *std::max_element(lr.layer_accuracy.begin(), lr.layer_accuracy.end());
    CHECK(lr.layer_accuracy[lr.layer - 1] == best);
    for (int l = 1; l < lr.layer; ++l) CHECK(lr.layer_accuracy[l - 1] < best);

    const auto again = extract_layer_replace(f.model, f.demos, f.task.queries[0], validation, f.labels);
    CHECK(std::get<LayerReplace>(again.body).layer_accuracy == lr.layer_accuracy);
    CHECK((std::get<LayerReplace>(again.body).vector - lr.vector).norm() == 0.0);

    const Model single(testutil::scrambled_parameters(testutil::tiny_config(1), 5, 0.4));
    CHECK(std::get<LayerReplace>(
              extract_layer_replace(single, f.demos, f.task.queries[0], validation, f.labels).body)
              .layer == 1);
    testutil::check_error(ErrorCode::empty_validation,
                          [&] { extract_layer_replace(f.model, f.demos, f.task.queries[0], {}, f.labels); });
}

TEST_CASE("MLP map gradient against finite differences") {
    std::mt19937_64 rng(40);
    MlpMap map = init_mlp_map(6, 10, 3);
    const Matrix h = testutil::gaussian(6, 9, rng);
    const Matrix y = testutil::gaussian(6, 9, rng);
    const MlpGradient g = mlp_map_gradient(map, h, y);
    CHECK(g.loss == doctest::Approx(mlp_map_loss(map, h, y)));
    for (Matrix* tensor : {&map.w1, &map.w2}) {
        const Matrix& grad = tensor == &map.w1 ? g.w1 : g.w2;
        int checked = 0;
        for (int attempt = 0; attempt < 500 && checked < 20; ++attempt) {
            const int r = static_cast<int>(rng() % tensor->rows());
            const int c = static_cast<int>(rng() % tensor->cols());
            if (std::abs(grad(r, c)) < 1e-7) continue;  // dead ReLU unit
            const double original = (*tensor)(r, c);
            (*tensor)(r, c) = original + 1e-5;
            const double up = mlp_map_loss(map, h, y);
            (*tensor)(r, c) = original - 1e-5;
            const double down = mlp_map_loss(map, h, y);
            (*tensor)(r, c) = original;
            const double fd = (up - down) / 2e-5;
            CHECK(std::abs(grad(r, c) - fd) / (std::abs(grad(r, c)) + 1e-8) < 1e-4);
            ++checked;
        }
        CHECK(checked == 20);
    }
}

TEST_CASE("train_mlp_map: zero rate keeps the initialisation, training lowers the loss") {
    std::mt19937_64 rng(41);
    ExtractionBatch batch;
    batch.h = testutil::gaussian(6, 32, rng);
    batch.y = testutil::gaussian(6, 6, rng, 0.3) * batch.h;
    MlpTrainConfig frozen;
    frozen.learning_rate = 0.0;
    const auto still = std::get<MlpMap>(train_mlp_map(batch, frozen).body);
    const MlpMap init = init_mlp_map(6, 6, frozen.seed);
    CHECK(still.w1 == init.w1);
    CHECK(still.w2 == init.w2);

    MlpTrainConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 1e-2;
    const auto trained = train_mlp_map(batch, cfg);
    CHECK(mlp_map_loss(std::get<MlpMap>(trained.body), batch.h, batch.y) < mlp_map_loss(init, batch.h, batch.y));
}

TEST_CASE("extract_logit_ltv: same-model identity and errors") {
    Fixture f;
    const std::vector<int> queries(f.task.queries.begin(), f.task.queries.end());
    const auto ltv = extract_ltv(f.model, f.demos, queries, 5.0);
    const auto logit = extract_logit_ltv(f.model, f.model, f.demos, queries, 5.0);
    const Matrix expected = f.model.params().lm_head * std::get<LtvLinear>(ltv.body).w_star;
    const Matrix& w_tilde = std::get<LogitLtv>(logit.body).w_tilde;
    CHECK((w_tilde - expected).norm() / w_tilde.norm() < 1e-6);
    for (int q : queries) {
        const auto a = tv_predict(f.model, ltv, q, f.labels);
        const auto b = tv_predict(f.model, logit, q, f.labels);
        CHECK((a.distribution.values() - b.distribution.values()).cwiseAbs().maxCoeff() < 1e-9);
        CHECK(a.label == b.label);
        CHECK(b.distribution.values().allFinite());
    }

    testutil::check_error(ErrorCode::too_few_shots, [&] { extract_logit_ltv(f.model, f.model, {}, queries, 5.0); });
    ModelConfig wide = testutil::tiny_config();
    wide.vocab_size = 50;
    const Model other(init_parameters(wide));
    testutil::check_error(ErrorCode::vocab_mismatch,
                          [&] { extract_logit_ltv(other, f.model, f.demos, queries, 5.0); });
}
