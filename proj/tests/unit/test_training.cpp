#include <doctest.h>

#include <cmath>
#include <cstring>

#include "morphkit/training.hpp"

using namespace morphkit;

namespace {

NetworkSpec tiny_classifier() {
    NetworkSpec spec;
    spec.input_rows = 4;
    spec.input_cols = 4;
    spec.layers.push_back({.kind = LayerKind::Flatten});
    spec.layers.push_back({.kind = LayerKind::Dense, .fc_width = 3});
    spec.layers.push_back({.kind = LayerKind::Softmax});
    return spec;
}

std::vector<double> flatten_params(const NetworkState& state) {
    std::vector<double> out;
    for_each_param(state,
                   [&](std::span<const double> p) { out.insert(out.end(), p.begin(), p.end()); });
    return out;
}

}  // namespace

TEST_CASE("mse_loss value and gradient") {
    std::vector<Image> pred{Image(1, 2)}, target{Image(1, 2)};
    pred[0].pix = {1.0, 3.0};
    target[0].pix = {0.0, 1.0};
    auto [loss, grads] = mse_loss(pred, target);
    CHECK(loss == doctest::Approx((1.0 + 4.0) / 2).epsilon(1e-15));
    CHECK(grads[0].pix[0] == doctest::Approx(2.0 * 1.0 / 2).epsilon(1e-15));
    CHECK(grads[0].pix[1] == doctest::Approx(2.0 * 2.0 / 2).epsilon(1e-15));
    CHECK_THROWS(mse_loss(pred, {Image(2, 2)}));
}

TEST_CASE("cross_entropy_loss frozen values") {
    // uniform 10-way prediction: loss = ln 10
    std::vector<std::vector<double>> probs{std::vector<double>(10, 0.1)};
    auto [loss, grads] = cross_entropy_loss(probs, {3});
    CHECK(loss == doctest::Approx(2.302585092994046).epsilon(1e-12));
    for (int k = 0; k < 10; ++k)
        CHECK(grads[0][k] == doctest::Approx(0.1 - (k == 3 ? 1.0 : 0.0)).epsilon(1e-12));

    // perfect prediction: zero loss, zero gradient
    std::vector<std::vector<double>> sure{{1.0, 0.0}};
    auto [l2, g2] = cross_entropy_loss(sure, {0});
    CHECK(l2 <= 1e-12);
    CHECK(std::abs(g2[0][0]) <= 1e-12);

    // batch of two averages both terms
    std::vector<std::vector<double>> pair{{0.5, 0.5}, {0.25, 0.75}};
    auto [l3, g3] = cross_entropy_loss(pair, {0, 1});
    CHECK(l3 == doctest::Approx((-std::log(0.5) - std::log(0.75)) / 2).epsilon(1e-12));
    CHECK(g3[0][0] == doctest::Approx((0.5 - 1.0) / 2).epsilon(1e-12));
}

TEST_CASE("sgd_update subtracts lr times grad") {
    auto spec = tiny_classifier();
    Rng rng(1);
    auto state = init_state(spec, rng);
    auto grads = zero_like(state);
    for_each_param(grads, [&](std::span<double> p) {
        for (auto& v : p) v = 1.0;
    });
    auto before = flatten_params(state);
    sgd_update(state, grads, 0.05);
    auto after = flatten_params(state);
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(after[i] == doctest::Approx(before[i] - 0.05).epsilon(1e-15));
    // 1.0 - 0.05 = 0.95 on a unit parameter
    auto unit = zero_like(state);
    for_each_param(unit, [&](std::span<double> p) {
        for (auto& v : p) v = 1.0;
    });
    sgd_update(unit, grads, 0.05);
    for (double v : flatten_params(unit)) CHECK(v == doctest::Approx(0.95).epsilon(1e-15));
}

TEST_CASE("decide_operation thresholds") {
    // tanh(2) ~ 0.964 > 0.5
    CHECK(decide_operation(2.0, SmoothSignKind::Tanh) == Decision::Dilation);
    // softsign(-0.3) ~ -0.23, inside the dead band
    CHECK(decide_operation(-0.3, SmoothSignKind::SoftSign) == Decision::Undecided);
    CHECK(decide_operation(-3.0, SmoothSignKind::SoftSign) == Decision::Erosion);
    CHECK(std::strcmp(decision_name(Decision::Dilation), "dilation") == 0);
    CHECK(std::strcmp(decision_name(Decision::Erosion), "erosion") == 0);
    CHECK(std::strcmp(decision_name(Decision::Undecided), "undecided") == 0);
}

TEST_CASE("binarize_se and exact match") {
    StructuringElement se;
    se.shape = {1, 2};
    se.weights = {0.49, 0.51};
    se.kind = SeKind::NonFlat;
    auto flat = binarize_se(se);
    CHECK(flat.weights == std::vector<double>{0.0, 1.0});
    CHECK(flat.kind == SeKind::Flat);

    StructuringElement truth = flat;
    CHECK(se_exact_match(flat, truth));
    truth.weights[0] = 1.0;
    CHECK_FALSE(se_exact_match(flat, truth));
}

TEST_CASE("training a tiny classifier is bitwise deterministic") {
    auto spec = tiny_classifier();
    std::vector<Image> inputs;
    std::vector<int> labels;
    Rng data_rng(55);
    for (int i = 0; i < 24; ++i) {
        Image img(4, 4);
        const int cls = i % 3;
        for (auto& v : img.pix) v = data_rng.uniform(0, 0.2);
        img.at(cls, cls) = 1.0;
        inputs.push_back(img);
        labels.push_back(cls);
    }
    TrainConfig cfg;
    cfg.learning_rate = 0.5;
    cfg.batch_size = 8;
    cfg.epochs = 5;
    cfg.loss = LossKind::CrossEntropy;
    cfg.seed = 7;
    cfg.workers = 1;

    auto run = [&](int workers) {
        auto cfg2 = cfg;
        cfg2.workers = workers;
        Rng rng(9);
        auto state = init_state(spec, rng);
        auto report = train(spec, state, {.inputs = &inputs, .labels = &labels}, cfg2);
        return std::make_pair(flatten_params(state), report.epoch_loss);
    };
    auto [p1, l1] = run(1);
    auto [p2, l2] = run(1);
    auto [p3, l3] = run(3);  // worker count must not change the arithmetic
    CHECK(p1 == p2);
    CHECK(l1 == l2);
    CHECK(p1 == p3);
    CHECK(l1 == l3);
    // and it actually learns
    CHECK(l1.back() < l1.front());
}

TEST_CASE("pred identical to target leaves parameters unchanged under MSE") {
    NetworkSpec spec;
    spec.input_rows = 3;
    spec.input_cols = 3;
    spec.layers.push_back(
        {.kind = LayerKind::Dilation, .se_rows = 3, .se_cols = 3, .filters = 1,
         .form = SeForm::Additive});
    Rng rng(2);
    auto state = init_state(spec, rng);
    Image x(3, 3);
    for (auto& v : x.pix) v = rng.uniform(0, 1);
    // target := the network's own output -> zero loss, zero gradient
    auto out = network_forward(spec, state, x, false, rng, nullptr);
    std::vector<Image> inputs{x}, targets{out.maps[0]};
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.batch_size = 1;
    cfg.epochs = 3;
    cfg.shuffle = false;
    cfg.workers = 1;
    auto before = flatten_params(state);
    auto report = train(spec, state, {.inputs = &inputs, .targets = &targets}, cfg);
    CHECK(report.final_loss <= 1e-20);
    CHECK(flatten_params(state) == before);
}

TEST_CASE("divergence raises with location info") {
    auto spec = tiny_classifier();
    Rng rng(3);
    auto state = init_state(spec, rng);
    // a huge learning rate on a steep loss blows the dense weights up
    std::get<DenseLayerState>(state[1]).w.assign(
        std::get<DenseLayerState>(state[1]).w.size(), 1e160);
    std::vector<Image> inputs{Image(4, 4, 1e160)};
    std::vector<int> labels{0};
    TrainConfig cfg;
    cfg.learning_rate = 1e10;
    cfg.batch_size = 1;
    cfg.epochs = 2;
    cfg.loss = LossKind::CrossEntropy;
    cfg.workers = 1;
    CHECK_THROWS_AS(train(spec, state, {.inputs = &inputs, .labels = &labels}, cfg),
                    TrainDivergence);
}

TEST_CASE("gradcheck: dense/softmax stack is exact to 1e-9") {
    auto spec = tiny_classifier();
    Rng rng(4);
    auto state = init_state(spec, rng);
    GradCheckSample sample;
    sample.input = Image(4, 4);
    for (auto& v : sample.input.pix) v = rng.uniform(0, 1);
    sample.label = 1;
    CHECK(finite_diff_check(spec, state, sample, LossKind::CrossEntropy) < 1e-7);
}

TEST_CASE("gradcheck: opening network under MSE") {
    auto spec = build_stacked({MorphMode::Erode, MorphMode::Dilate}, {3, 3}, SeForm::Additive,
                              6, 6);
    Rng rng(5);
    auto state = init_state(spec, rng);
    GradCheckSample sample;
    sample.input = Image(6, 6);
    for (auto& v : sample.input.pix) v = rng.uniform(0, 1);
    sample.target = Image(6, 6);
    for (auto& v : sample.target->pix) v = rng.uniform(0, 1);
    CHECK(finite_diff_check(spec, state, sample, LossKind::MSE) < 1e-4);
}

TEST_CASE("gradcheck: product-form morphological network") {
    auto spec = build_stacked({MorphMode::Dilate}, {3, 3}, SeForm::Product, 5, 5);
    Rng rng(6);
    auto state = init_state(spec, rng);
    GradCheckSample sample;
    sample.input = Image(5, 5);
    for (auto& v : sample.input.pix) v = rng.uniform(0.1, 1);
    sample.target = Image(5, 5);
    for (auto& v : sample.target->pix) v = rng.uniform(0, 1);
    CHECK(finite_diff_check(spec, state, sample, LossKind::MSE) < 1e-4);
}

TEST_CASE("gradcheck: adaptive layer including the gate") {
    for (SmoothSignKind smooth : {SmoothSignKind::SoftSign, SmoothSignKind::Tanh}) {
        auto spec = build_adaptive_single({3, 3}, SeForm::Additive, smooth, 5, 5);
        Rng rng(8);
        auto state = init_state(spec, rng);
        GradCheckSample sample;
        sample.input = Image(5, 5);
        for (auto& v : sample.input.pix) v = rng.uniform(0, 1);
        sample.target = Image(5, 5);
        for (auto& v : sample.target->pix) v = rng.uniform(0, 1);
        CHECK(finite_diff_check(spec, state, sample, LossKind::MSE) < 1e-5);
    }
}

TEST_CASE("gradcheck: full residual classifier") {
    DatasetProfile small;
    small.name = "small";
    small.rows = 8;
    small.cols = 8;
    small.classes = 3;
    small.fc_widths = {10};
    auto spec = build_residual_mnn(small, 2);
    Rng rng(10);
    auto state = init_state(spec, rng);
    GradCheckSample sample;
    sample.input = Image(8, 8);
    for (auto& v : sample.input.pix) v = rng.uniform(0, 1);
    sample.label = 2;
    CHECK(finite_diff_check(spec, state, sample, LossKind::CrossEntropy) < 1e-4);
}

TEST_CASE("evaluate_accuracy and evaluate_mse") {
    auto spec = tiny_classifier();
    Rng rng(12);
    auto state = init_state(spec, rng);
    std::vector<Image> inputs{Image(4, 4, 0.5)};
    auto out = network_forward(spec, state, inputs[0], false, rng, nullptr);
    int argmax = 0;
    for (std::size_t k = 1; k < out.vec.size(); ++k)
        if (out.vec[k] > out.vec[argmax]) argmax = static_cast<int>(k);
    CHECK(evaluate_accuracy(spec, state, inputs, {argmax}) == 1.0);
    CHECK(evaluate_accuracy(spec, state, inputs, {(argmax + 1) % 3}) == 0.0);

    auto id_spec = build_stacked({MorphMode::Dilate}, {1, 1}, SeForm::Additive, 2, 2);
    Rng rng2(13);
    auto id_state = init_state(id_spec, rng2);
    Image x(2, 2, 0.3);
    auto y = network_forward(id_spec, id_state, x, false, rng2, nullptr);
    CHECK(evaluate_mse(id_spec, id_state, {x}, {y.maps[0]}) <= 1e-20);
}
