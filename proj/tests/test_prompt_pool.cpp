#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cprompt/optim.hpp"
#include "cprompt/prompt_pool.hpp"
#include "cprompt/rng.hpp"
#include "testutil.hpp"

using namespace cprompt;

namespace {

constexpr int kDim = 6;

PromptPool<double> two_task_pool(Rng& rng, bool multi_key = true) {
    PromptPool<double> pool(4, kDim, multi_key);
    pool.add_task({10, 11}, rng);
    pool.add_task({12, 13}, rng);
    return pool;
}

Tensor<double> unit_row(std::vector<double> v) {
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    return Tensor<double>({1, static_cast<int>(v.size())}, v);
}

}  // namespace

TEST_CASE("task prompts and keys have the advertised shapes") {
    Rng rng(1);
    auto pool = two_task_pool(rng);
    CHECK(pool.num_tasks() == 2);
    CHECK(pool.task(0).prompt.shape() == std::vector<int>{4, kDim});
    CHECK(pool.task(0).keys.shape() == std::vector<int>{2, kDim});  // one key per class
    CHECK(pool.task(0).prompt.requires_grad());
    CHECK(pool.task(0).keys.requires_grad());
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < pool.task(t).num_keys(); ++j) {
            double n = 0;
            const double* row = pool.task(t).keys.data() + j * kDim;
            for (int c = 0; c < kDim; ++c) n += row[c] * row[c];
            CHECK(n == doctest::Approx(1.0).epsilon(1e-12));  // unit initialisation
        }

    Rng rng2(1);
    auto single = two_task_pool(rng2, /*multi_key=*/false);
    CHECK(single.task(0).keys.shape() == std::vector<int>{1, kDim});
    CHECK(single.task(1).keys.shape() == std::vector<int>{1, kDim});

    CHECK_THROWS_AS(pool.add_task({12}, rng), std::invalid_argument);  // already owned
    CHECK_THROWS_AS(pool.add_task({}, rng), std::invalid_argument);
    CHECK_THROWS_AS(pool.task(5), std::out_of_range);
}

TEST_CASE("selection returns the task owning the closest key") {
    Rng rng(2);
    auto pool = two_task_pool(rng);
    // Plant orthogonal keys so the winner is unambiguous.
    for (int c = 0; c < kDim; ++c) {
        pool.task(0).keys.data()[0 * kDim + c] = c == 0 ? 1.0 : 0.0;
        pool.task(0).keys.data()[1 * kDim + c] = c == 1 ? 1.0 : 0.0;
        pool.task(1).keys.data()[0 * kDim + c] = c == 2 ? 1.0 : 0.0;
        pool.task(1).keys.data()[1 * kDim + c] = c == 3 ? 1.0 : 0.0;
    }
    auto q = unit_row({0.1, 0.0, 0.9, 0.0, 0.0, 0.0});  // closest to task 1 key 0
    CHECK(pool.select(q.data()) == 1);
    auto q2 = unit_row({0.9, 0.2, 0.1, 0.0, 0.0, 0.0});
    CHECK(pool.select(q2.data()) == 0);

    Tensor<double> batch({2, kDim});
    std::copy(q.data(), q.data() + kDim, batch.data());
    std::copy(q2.data(), q2.data() + kDim, batch.data() + kDim);
    auto picked = pool.select_batch(batch);
    CHECK(picked == std::vector<int>{1, 0});
    CHECK(pool.selection_accuracy(batch, {1, 0}) == 1.0);
    CHECK(pool.selection_accuracy(batch, {0, 0}) == 0.5);
}

TEST_CASE("exact key ties resolve to the lowest task") {
    Rng rng(3);
    auto pool = two_task_pool(rng);
    // Identical key rows in both tasks: scanning order must pick task 0.
    for (int t = 0; t < 2; ++t)
        for (int j = 0; j < 2; ++j)
            for (int c = 0; c < kDim; ++c)
                pool.task(t).keys.data()[j * kDim + c] = c == 0 ? 1.0 : 0.0;
    auto q = unit_row({1.0, 0.1, 0.0, 0.0, 0.0, 0.0});
    CHECK(pool.select(q.data()) == 0);
}

TEST_CASE("random keys select tasks at chance rate") {
    // Keys and queries drawn independently: the winning key is uniform over
    // the pool, so per-task accuracy sits near 1/T.
    const int tasks = 4;
    double acc_sum = 0;
    int trials = 0;
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(100 + seed);
        PromptPool<double> pool(4, kDim, true);
        for (int t = 0; t < tasks; ++t) pool.add_task({t * 2, t * 2 + 1}, rng);
        const int n = 64;
        auto q = Tensor<double>::randn({n, kDim}, rng, 1.0);
        std::vector<int> truth(n);
        for (auto& t : truth) t = static_cast<int>(rng.uniform_int(tasks));
        acc_sum += pool.selection_accuracy(q, truth);
        ++trials;
    }
    const double mean_acc = acc_sum / trials;
    CHECK(mean_acc == doctest::Approx(1.0 / tasks).epsilon(0.4));
    CHECK(std::abs(mean_acc - 1.0 / tasks) < 0.1);
}

TEST_CASE("key matching loss matches the softmax oracle") {
    Rng rng(4);
    PromptPool<double> pool(4, kDim, true);
    pool.add_task({0}, rng);
    pool.add_task({1}, rng);
    // Orthogonal unit keys; query equals key 0, so scores are [1, 0] and the
    // loss is ln(1 + e^{-1}).
    for (int c = 0; c < kDim; ++c) {
        pool.task(0).keys.data()[c] = c == 0 ? 1.0 : 0.0;
        pool.task(1).keys.data()[c] = c == 1 ? 1.0 : 0.0;
    }
    Tensor<double> q({1, kDim});
    q.data()[0] = 1.0;
    auto loss = pool.multi_key_loss(q, {0});
    CHECK(loss.item() == doctest::Approx(0.31326168751822286).epsilon(1e-12));
    auto flipped = pool.multi_key_loss(q, {1});
    CHECK(flipped.item() == doctest::Approx(1.3132616875182228).epsilon(1e-12));

    CHECK_THROWS_AS((void)pool.multi_key_loss(q, {7}), std::out_of_range);
    CHECK_THROWS_AS((void)pool.multi_key_loss(q, {0, 1}), std::invalid_argument);
}

TEST_CASE("single task with one key gives exactly zero loss") {
    Rng rng(5);
    PromptPool<double> pool(4, kDim, false);
    pool.add_task({0, 1}, rng);
    auto q = Tensor<double>::randn({3, kDim}, rng, 1.0);
    auto loss = pool.multi_key_loss(q, {0, 1, 0});
    CHECK(loss.item() == 0.0);  // lone logit, softmax is identically one
}

TEST_CASE("gradients reach only the unfrozen keys") {
    Rng rng(6);
    auto pool = two_task_pool(rng);
    pool.freeze_task(0);
    CHECK(pool.task(0).frozen);
    auto q = Tensor<double>::randn({5, kDim}, rng, 1.0);
    std::vector<int> labels{12, 13, 12, 13, 12};

    auto make_loss = [&]() { return pool.multi_key_loss(q, labels); };
    CHECK(testutil::max_grad_err(pool.task(1).keys, make_loss, 1e-6) < 1e-7);

    pool.task(1).keys.zero_grad();
    auto loss = make_loss();
    loss.backward();
    CHECK(pool.task(1).keys.has_grad());
    CHECK(!pool.task(0).keys.has_grad());
    CHECK(!q.has_grad());  // queries are constants inside the loss
}

TEST_CASE("one optimizer step lowers the key matching loss") {
    Rng rng(7);
    auto pool = two_task_pool(rng);
    auto q = Tensor<double>::randn({8, kDim}, rng, 1.0);
    std::vector<int> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(10 + i % 4);

    std::vector<Tensor<double>> params{pool.task(0).keys, pool.task(1).keys};
    SgdMomentum<double> opt(0.0);
    opt.bind(params);
    const double before = pool.multi_key_loss(q, labels).item();
    auto loss = pool.multi_key_loss(q, labels);
    loss.backward();
    opt.step(params, 0.5);
    const double after = pool.multi_key_loss(q, labels).item();
    CHECK(after < before);
}

TEST_CASE("pool state survives serialization") {
    Rng rng(8);
    auto pool = two_task_pool(rng);
    pool.freeze_task(0);
    ByteWriter w;
    pool.serialize(w);
    ByteReader r(w.bytes());
    auto loaded = PromptPool<double>::deserialize(r);
    CHECK(r.exhausted());
    CHECK(loaded.num_tasks() == 2);
    CHECK(loaded.multi_key());
    CHECK(loaded.task(0).frozen);
    CHECK(!loaded.task(1).frozen);
    CHECK(loaded.task(0).prompt.values() == pool.task(0).prompt.values());
    CHECK(loaded.task(1).keys.values() == pool.task(1).keys.values());
    CHECK(loaded.task(0).class_labels == std::vector<int>{10, 11});
    CHECK(loaded.task_of_label(13) == 1);

    auto q = Tensor<double>::randn({2, kDim}, rng, 1.0);
    Rng probe(9);
    CHECK(loaded.multi_key_loss(q, {10, 12}).item() ==
          pool.multi_key_loss(q, {10, 12}).item());
    CHECK(loaded.sample_task(probe) >= 0);
    CHECK(loaded.sample_task(probe) < 2);
}
