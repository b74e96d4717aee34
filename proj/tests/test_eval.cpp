#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cprompt/eval.hpp"
#include "cprompt/rng.hpp"
#include "testutil.hpp"

using namespace cprompt;

namespace {

AccuracyMatrix build(std::vector<std::vector<double>> rows, std::vector<int> classes) {
    AccuracyMatrix m;
    for (std::size_t t = 0; t < rows.size(); ++t) m.add_row(rows[t], classes[t]);
    return m;
}

BackboneConfig micro_config() {
    BackboneConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    cfg.embed_dim = 4;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.prompt_len = 2;
    cfg.prompt_insert_layers = {1, 2};
    return cfg;
}

struct EvalState {
    Rng rng;
    Backbone<double> net;
    PromptPool<double> pool;
    ClassifierBank<double> bank;

    explicit EvalState(int tasks, std::uint64_t seed = 31)
        : rng(seed), net(micro_config(), rng), pool(2, 4, true), bank(4) {
        net.freeze();
        for (int t = 0; t < tasks; ++t) {
            std::vector<int> ids{2 * t, 2 * t + 1};
            pool.add_task(ids, rng);
            bank.add_head(ids, rng);
            pool.freeze_task(t);
            bank.freeze_head(t);
        }
    }
};

}  // namespace

TEST_CASE("metric oracles on hand matrices") {
    // two tasks, equal sizes
    auto m1 = build({{0.9}, {0.8, 0.6}}, {2, 2});
    CHECK(last_acc(m1) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(avg_acc(m1) == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(forgetting_ff(m1) == doctest::Approx(0.1).epsilon(1e-15));

    // three tasks, unequal class counts exercise the weighting
    auto m2 = build({{1.0}, {0.5, 0.75}, {0.25, 0.5, 1.0}}, {2, 4, 2});
    CHECK(last_acc(m2) == doctest::Approx(0.5625).epsilon(1e-15));
    CHECK(avg_acc(m2) == doctest::Approx(0.7430555555555556).epsilon(1e-15));
    CHECK(forgetting_ff(m2) == doctest::Approx(0.5).epsilon(1e-15));

    // four tasks with one late improvement (negative forgetting term)
    auto m3 = build({{0.6}, {0.7, 0.9}, {0.5, 0.8, 0.4}, {0.65, 0.85, 0.45, 0.95}},
                    {3, 3, 3, 3});
    CHECK(last_acc(m3) == doctest::Approx(0.725).epsilon(1e-15));
    CHECK(avg_acc(m3) == doctest::Approx(0.6729166666666667).epsilon(1e-15));
    CHECK(forgetting_ff(m3) == doctest::Approx(0.016666666666666666).epsilon(1e-15));

    // brute-force re-evaluation of the forgetting formula on m3
    double s = 0;
    for (int j = 0; j < 3; ++j) {
        double peak = -1;
        for (int i = j; i < 3; ++i) peak = std::max(peak, m3.a[i][j]);
        s += peak - m3.a[3][j];
    }
    CHECK(forgetting_ff(m3) == doctest::Approx(s / 3.0).epsilon(1e-15));
}

TEST_CASE("metric edge cases") {
    auto one = build({{0.42}}, {4});
    CHECK(last_acc(one) == 0.42);
    CHECK(avg_acc(one) == 0.42);
    CHECK_THROWS_AS(forgetting_ff(one), std::invalid_argument);

    AccuracyMatrix m;
    CHECK_THROWS_AS(last_acc(m), std::invalid_argument);
    CHECK_THROWS_AS(m.add_row({0.5, 0.5}, 2), std::invalid_argument);  // row 0 needs 1 entry
    m.add_row({0.5}, 2);
    CHECK_THROWS_AS(m.add_row({1.5, 0.0}, 2), std::invalid_argument);  // out of range

    // equal task sizes: last_acc is the plain mean of the final row
    auto eq = build({{0.9}, {0.8, 0.6}, {0.3, 0.6, 0.9}}, {5, 5, 5});
    CHECK(last_acc(eq) == doctest::Approx((0.3 + 0.6 + 0.9) / 3).epsilon(1e-15));
    // avg_acc is bounded by the row accuracies
    const double rows[3] = {row_weighted_accuracy(eq, 0), row_weighted_accuracy(eq, 1),
                            row_weighted_accuracy(eq, 2)};
    CHECK(avg_acc(eq) >= *std::min_element(rows, rows + 3));
    CHECK(avg_acc(eq) <= *std::max_element(rows, rows + 3));
}

TEST_CASE("concatenated heads map the argmax to global ids with low-index ties") {
    EvalState st(3, 41);
    // Zero weights make every logit equal its bias, so predictions are
    // controlled exactly.
    for (int t = 0; t < 3; ++t) {
        std::fill(st.bank.head_w(t).values().begin(), st.bank.head_w(t).values().end(), 0.0);
        std::fill(st.bank.head_b(t).values().begin(), st.bank.head_b(t).values().end(), 0.0);
    }
    auto images = Tensor<double>::randn({3, 16}, st.rng, 1.0);

    st.bank.head_b(1).values() = {0.0, 2.0};  // global class 3 wins
    auto pred = predict_fixed_prompt(st.net, st.pool, st.bank, images, 0);
    CHECK(pred == std::vector<int>{3, 3, 3});

    // all-equal logits tie: the earliest task's first class wins
    st.bank.head_b(1).values() = {0.0, 0.0};
    pred = predict_fixed_prompt(st.net, st.pool, st.bank, images, 0);
    CHECK(pred == std::vector<int>{0, 0, 0});

    // TIL restricts scoring to the requested head
    st.bank.head_b(2).values() = {0.1, 0.7};
    pred = predict_til(st.net, st.pool, st.bank, images, 2);
    CHECK(pred == std::vector<int>{5, 5, 5});
    CHECK_THROWS_AS((void)predict_til(st.net, st.pool, st.bank, images, 7), std::out_of_range);
    CHECK_THROWS_AS((void)predict_fixed_prompt(st.net, st.pool, st.bank, images, -1),
                    std::out_of_range);
}

TEST_CASE("class-incremental prediction equals the per-example path") {
    EvalState st(3, 43);
    auto images = Tensor<double>::randn({7, 16}, st.rng, 1.0);
    auto batched = predict_cil(st.net, st.pool, st.bank, images);
    for (int r = 0; r < 7; ++r) {
        Tensor<double> one({1, 16});
        std::copy(images.data() + r * 16, images.data() + (r + 1) * 16, one.data());
        auto single = predict_cil(st.net, st.pool, st.bank, one);
        CHECK(single[0] == batched[static_cast<std::size_t>(r)]);
    }
    // determinism, bit for bit
    CHECK(predict_cil(st.net, st.pool, st.bank, images) == batched);
}

TEST_CASE("accuracy evaluation is invariant to the eval batch size") {
    EvalState st(2, 47);
    Dataset<double> ds;
    ds.image_dim = 16;
    Rng drng(5);
    for (int i = 0; i < 11; ++i) {
        for (int j = 0; j < 16; ++j) ds.pixels.push_back(drng.normal());
        ds.labels.push_back(i % 4);
    }
    const double a = evaluate_accuracy(st.net, st.pool, st.bank, ds, EvalMode::cil, -1, 64);
    const double b = evaluate_accuracy(st.net, st.pool, st.bank, ds, EvalMode::cil, -1, 3);
    CHECK(a == b);
    const double t1 = evaluate_accuracy(st.net, st.pool, st.bank, ds, EvalMode::til, 1, 64);
    const double t2 = evaluate_accuracy(st.net, st.pool, st.bank, ds, EvalMode::til, 1, 4);
    CHECK(t1 == t2);
}

TEST_CASE("task selection accuracy counts routed examples") {
    EvalState st(2, 53);
    // plant orthogonal keys and craft a dataset whose queries we steer by
    // overwriting keys to match the backbone's actual query features
    Dataset<double> ds;
    ds.image_dim = 16;
    Rng drng(9);
    for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 16; ++j) ds.pixels.push_back(drng.normal());
        ds.labels.push_back(i % 2);
    }
    std::vector<std::int64_t> idx{0, 1, 2, 3, 4, 5};
    auto [batch, labels] = make_batch(ds, idx);
    auto q = st.net.forward_query(batch);
    // key of task 0 := first example's query direction; task 1 := orthogonal-ish noise
    for (int c = 0; c < 4; ++c) {
        st.pool.task(0).keys.data()[c] = q.data()[c];
        st.pool.task(0).keys.data()[4 + c] = q.data()[c];
    }
    const double acc0 = task_selection_accuracy(st.net, st.pool, ds, 0);
    const double acc1 = task_selection_accuracy(st.net, st.pool, ds, 1);
    CHECK(acc0 + acc1 == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(acc0 >= 1.0 / 6.0);  // at least the planted example routes home
}

TEST_CASE("fixed prompt probe needs two tasks") {
    EvalState st(1, 59);
    SyntheticSpec spec;
    spec.num_pretrain_classes = 2;
    spec.tasks = 1;
    spec.classes_per_task = 2;
    spec.train_per_class = 2;
    spec.test_per_class = 2;
    spec.pretrain_train_per_class = 2;
    spec.pretrain_test_per_class = 2;
    spec.image_size = 4;
    spec.channels = 1;
    Rng rng(3);
    auto stream = generate_synthetic<double>(spec, rng);
    CHECK_THROWS_AS((void)fixed_prompt_probe(st.net, st.pool, st.bank, stream),
                    std::invalid_argument);
}
