#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cprompt/ops.hpp"
#include "cprompt/optim.hpp"
#include "cprompt/rng.hpp"
#include "cprompt/tensor.hpp"
#include "testutil.hpp"

using cprompt::Rng;
using cprompt::Tensor;

namespace {
Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    return Tensor<double>::randn(std::move(shape), rng, scale);
}
}  // namespace

TEST_CASE("tensor basics and validation") {
    Tensor<double> t({2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor<double>({0, 2}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor<double>({2}, std::vector<double>{1.0}), std::invalid_argument);
    CHECK_THROWS_AS(t.item(), std::invalid_argument);
    CHECK(Tensor<double>::scalar(4.0).item() == 4.0);
}

TEST_CASE("matmul value and identity") {
    Tensor<double> a({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor<double> eye({2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto out = cprompt::matmul(a, eye);
    for (int i = 0; i < 4; ++i) CHECK(out.data()[i] == a.data()[i]);

    Tensor<double> bad({3, 2});
    CHECK_THROWS_AS(cprompt::matmul(a, Tensor<double>({3, 2})), std::invalid_argument);
}

TEST_CASE("matmul gradients match central differences") {
    Rng rng(7);
    auto a = random_tensor({3, 4}, rng);
    auto w = random_tensor({4, 5}, rng);
    a.set_requires_grad(true);
    w.set_requires_grad(true);
    auto loss_fn = [&] {
        auto y = cprompt::matmul(a, w);
        return cprompt::mean_all(cprompt::mul(y, y));
    };
    CHECK(testutil::max_grad_err(a, loss_fn) < 1e-8);
    CHECK(testutil::max_grad_err(w, loss_fn) < 1e-8);
}

TEST_CASE("softmax rows sum to one and match the logistic oracle") {
    // Frozen oracle for logits [1, 0]: sigma(1) = 1/(1+e^-1).
    const double p0 = 0.7310585786300049;
    const double p1 = 0.2689414213699951;
    Tensor<double> z({1, 2}, {1.0, 0.0});
    auto y = cprompt::softmax_rows(z);
    CHECK(y.data()[0] == doctest::Approx(p0).epsilon(1e-9));
    CHECK(y.data()[1] == doctest::Approx(p1).epsilon(1e-9));

    Rng rng(3);
    auto x = random_tensor({5, 7}, rng, 3.0);
    auto s = cprompt::softmax_rows(x);
    for (int r = 0; r < 5; ++r) {
        double sum = 0.0;
        for (int j = 0; j < 7; ++j) sum += s.data()[r * 7 + j];
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("softmax is shift invariant") {
    Tensor<double> a({1, 2}, {1.0, 0.0});
    Tensor<double> b({1, 2}, {101.0, 100.0});
    auto ya = cprompt::softmax_rows(a);
    auto yb = cprompt::softmax_rows(b);
    CHECK(std::abs(ya.data()[0] - yb.data()[0]) < 1e-12);
    CHECK(std::abs(ya.data()[1] - yb.data()[1]) < 1e-12);
}

TEST_CASE("softmax gradient and axis handling") {
    Rng rng(11);
    auto x = random_tensor({2, 3, 4}, rng);
    x.set_requires_grad(true);
    Tensor<double> w({2, 3, 4});
    for (int i = 0; i < 24; ++i) w.data()[i] = 0.1 * (i % 5);
    for (int axis = 0; axis < 3; ++axis) {
        auto loss_fn = [&] {
            auto y = cprompt::softmax(x, axis);
            return cprompt::sum_all(cprompt::mul(y, w));
        };
        CHECK(testutil::max_grad_err(x, loss_fn) < 1e-7);
    }
    CHECK_THROWS_AS(cprompt::softmax(x, 3), std::invalid_argument);
}

TEST_CASE("log_softmax gradient") {
    Rng rng(13);
    auto x = random_tensor({3, 5}, rng, 2.0);
    x.set_requires_grad(true);
    Tensor<double> w({3, 5});
    for (int i = 0; i < 15; ++i) w.data()[i] = (i % 3 == 0) ? 1.0 : -0.5;
    auto loss_fn = [&] { return cprompt::sum_all(cprompt::mul(cprompt::log_softmax_rows(x), w)); };
    CHECK(testutil::max_grad_err(x, loss_fn) < 1e-7);
}

TEST_CASE("stop_gradient blocks exactly one branch") {
    // d/dx sum(x * sg(x)) == x, not 2x.
    Tensor<double> x({4}, {0.5, -1.0, 2.0, 3.0});
    x.set_requires_grad(true);
    auto loss = cprompt::sum_all(cprompt::mul(x, cprompt::stop_gradient(x)));
    loss.backward();
    REQUIRE(x.has_grad());
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == x.data()[i]);

    // A fully detached path contributes no gradient at all.
    x.zero_grad();
    auto detached = cprompt::sum_all(cprompt::stop_gradient(x));
    CHECK_FALSE(detached.requires_grad());
}

TEST_CASE("cross_entropy values and properties") {
    // Uniform two-class logits, label 0: loss is ln 2.
    Tensor<double> z({2}, {0.0, 0.0});
    CHECK(cprompt::cross_entropy(z, 0).item() == doctest::Approx(0.6931471805599453).epsilon(1e-12));

    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        auto logits = random_tensor({4, 6}, rng, 5.0);
        std::vector<int> labels;
        for (int r = 0; r < 4; ++r) labels.push_back(static_cast<int>(rng.uniform_int(6)));
        CHECK(cprompt::cross_entropy(logits, labels).item() >= 0.0);
    }
    CHECK_THROWS_AS(cprompt::cross_entropy(z, 2), std::out_of_range);
    CHECK_THROWS_AS(cprompt::cross_entropy(z, -1), std::out_of_range);
}

TEST_CASE("cross_entropy gradient matches central differences") {
    Rng rng(19);
    auto logits = random_tensor({3, 5}, rng, 2.0);
    logits.set_requires_grad(true);
    std::vector<int> labels{1, 4, 0};
    auto loss_fn = [&] { return cprompt::cross_entropy(logits, labels); };
    CHECK(testutil::max_grad_err(logits, loss_fn) < 1e-8);
}

TEST_CASE("cosine_similarity oracle values and zero-norm guard") {
    Tensor<double> a({2}, {1.0, 1.0});
    Tensor<double> b({2}, {1.0, 0.0});
    CHECK(cprompt::cosine_similarity(a, b).item() ==
          doctest::Approx(0.7071067811865476).epsilon(1e-12));

    Tensor<double> ox({2}, {1.0, 0.0});
    Tensor<double> oy({2}, {0.0, 1.0});
    CHECK(std::abs(cprompt::cosine_similarity(ox, oy).item()) < 1e-15);

    Tensor<double> zero({2}, {0.0, 0.0});
    CHECK_THROWS_AS(cprompt::cosine_similarity(a, zero), std::invalid_argument);
}

TEST_CASE("cosine_similarity gradient") {
    Rng rng(23);
    auto a = random_tensor({6}, rng);
    auto b = random_tensor({6}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    auto loss_fn = [&] { return cprompt::cosine_similarity(a, b); };
    CHECK(testutil::max_grad_err(a, loss_fn) < 1e-8);
    CHECK(testutil::max_grad_err(b, loss_fn) < 1e-8);
}

TEST_CASE("cosine_qk agrees with the scalar form and differentiates") {
    Rng rng(29);
    auto q = random_tensor({3, 4}, rng);
    auto k = random_tensor({5, 4}, rng);
    auto sims = cprompt::cosine_qk(q, k);
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 5; ++j) {
            Tensor<double> qi({4}, std::vector<double>(q.data() + i * 4, q.data() + (i + 1) * 4));
            Tensor<double> kj({4}, std::vector<double>(k.data() + j * 4, k.data() + (j + 1) * 4));
            CHECK(sims.data()[i * 5 + j] ==
                  doctest::Approx(cprompt::cosine_similarity(qi, kj).item()).epsilon(1e-12));
        }
    }
    k.set_requires_grad(true);
    Tensor<double> w({3, 5});
    for (int i = 0; i < 15; ++i) w.data()[i] = 0.3 * ((i % 4) - 1.5);
    auto loss_fn = [&] { return cprompt::sum_all(cprompt::mul(cprompt::cosine_qk(q, k), w)); };
    CHECK(testutil::max_grad_err(k, loss_fn) < 1e-7);
}

TEST_CASE("layer_norm zeroes constants and differentiates") {
    Tensor<double> x({1, 5}, 3.25);
    Tensor<double> gamma({5}, 1.0);
    Tensor<double> beta({5}, 0.0);
    auto y = cprompt::layer_norm_rows(x, gamma, beta);
    for (int j = 0; j < 5; ++j) CHECK(std::abs(y.data()[j]) < 1e-9);

    Rng rng(31);
    auto xr = random_tensor({4, 6}, rng);
    auto g = random_tensor({6}, rng, 0.5);
    auto b = random_tensor({6}, rng, 0.5);
    xr.set_requires_grad(true);
    g.set_requires_grad(true);
    b.set_requires_grad(true);
    Tensor<double> w({4, 6});
    for (int i = 0; i < 24; ++i) w.data()[i] = 0.2 * ((i % 7) - 3);
    auto loss_fn = [&] {
        return cprompt::sum_all(cprompt::mul(cprompt::layer_norm_rows(xr, g, b), w));
    };
    CHECK(testutil::max_grad_err(xr, loss_fn) < 1e-6);
    CHECK(testutil::max_grad_err(g, loss_fn) < 1e-7);
    CHECK(testutil::max_grad_err(b, loss_fn) < 1e-7);
}

TEST_CASE("gelu values and gradient") {
    Tensor<double> x({3}, {0.0, 10.0, -10.0});
    auto y = cprompt::gelu(x);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(std::abs(y.data()[2]) < 1e-8);

    Rng rng(37);
    auto xr = random_tensor({2, 9}, rng);
    xr.set_requires_grad(true);
    auto loss_fn = [&] { return cprompt::mean_all(cprompt::gelu(xr)); };
    CHECK(testutil::max_grad_err(xr, loss_fn) < 1e-8);
}

TEST_CASE("token ops differentiate and validate shapes") {
    Rng rng(41);
    auto m = random_tensor({2, 3}, rng);
    auto x = random_tensor({2, 4, 3}, rng);
    m.set_requires_grad(true);
    x.set_requires_grad(true);
    Tensor<double> w({2, 6, 3});
    for (int i = 0; i < 36; ++i) w.data()[i] = 0.1 * ((i % 5) - 2);
    auto loss_fn = [&] {
        auto cat = cprompt::concat_tokens(m, x);
        return cprompt::sum_all(cprompt::mul(cat, w));
    };
    CHECK(testutil::max_grad_err(m, loss_fn) < 1e-8);
    CHECK(testutil::max_grad_err(x, loss_fn) < 1e-8);

    auto cat = cprompt::concat_tokens(m, x);
    CHECK(cat.dim(1) == 6);
    CHECK_THROWS_AS(cprompt::concat_tokens(random_tensor({2, 5}, rng), x), std::invalid_argument);

    auto slice_fn = [&] {
        auto s = cprompt::slice_tokens(x, 1, 3);
        return cprompt::mean_all(cprompt::mul(s, s));
    };
    CHECK(testutil::max_grad_err(x, slice_fn) < 1e-8);
    CHECK_THROWS_AS(cprompt::slice_tokens(x, 3, 3), std::out_of_range);
    CHECK_THROWS_AS(cprompt::slice_tokens(x, 0, 5), std::out_of_range);

    auto pos = random_tensor({4, 3}, rng);
    pos.set_requires_grad(true);
    auto pos_fn = [&] {
        auto y = cprompt::add_broadcast_rows(x, pos);
        return cprompt::mean_all(cprompt::mul(y, y));
    };
    CHECK(testutil::max_grad_err(pos, pos_fn) < 1e-8);

    auto rows = random_tensor({6, 3}, rng);
    rows.set_requires_grad(true);
    auto rows_fn = [&] {
        auto s = cprompt::slice_rows(rows, 2, 5);
        return cprompt::mean_all(cprompt::mul(s, s));
    };
    CHECK(testutil::max_grad_err(rows, rows_fn) < 1e-8);
}

TEST_CASE("attention gradient matches central differences") {
    Rng rng(43);
    auto qkv = random_tensor({2, 3, 12}, rng, 0.7);  // d = 4, two heads
    qkv.set_requires_grad(true);
    Tensor<double> w({2, 3, 4});
    for (int i = 0; i < 24; ++i) w.data()[i] = 0.25 * ((i % 3) - 1);
    auto loss_fn = [&] {
        auto out = cprompt::attention_qkv(qkv, 2);
        return cprompt::sum_all(cprompt::mul(out, w));
    };
    CHECK(testutil::max_grad_err(qkv, loss_fn, 1e-5) < 1e-6);
    CHECK_THROWS_AS(cprompt::attention_qkv(qkv, 5), std::invalid_argument);
}

TEST_CASE("bias, concat_cols and reshape differentiate") {
    Rng rng(47);
    auto x = random_tensor({3, 4}, rng);
    auto b = random_tensor({4}, rng);
    x.set_requires_grad(true);
    b.set_requires_grad(true);
    auto bias_fn = [&] {
        auto y = cprompt::add_bias(x, b);
        return cprompt::mean_all(cprompt::mul(y, y));
    };
    CHECK(testutil::max_grad_err(x, bias_fn) < 1e-8);
    CHECK(testutil::max_grad_err(b, bias_fn) < 1e-8);

    auto p1 = random_tensor({2, 2}, rng);
    auto p2 = random_tensor({2, 3}, rng);
    p1.set_requires_grad(true);
    p2.set_requires_grad(true);
    Tensor<double> w({2, 5});
    for (int i = 0; i < 10; ++i) w.data()[i] = 0.5 * ((i % 4) - 2);
    auto cat_fn = [&] {
        auto cat = cprompt::concat_cols<double>({p1, p2});
        return cprompt::sum_all(cprompt::mul(cat, w));
    };
    CHECK(testutil::max_grad_err(p1, cat_fn) < 1e-8);
    CHECK(testutil::max_grad_err(p2, cat_fn) < 1e-8);

    auto r = random_tensor({2, 6}, rng);
    r.set_requires_grad(true);
    auto reshape_fn = [&] {
        auto y = cprompt::reshape(r, {3, 4});
        return cprompt::mean_all(cprompt::mul(y, y));
    };
    CHECK(testutil::max_grad_err(r, reshape_fn) < 1e-8);
    CHECK_THROWS_AS(cprompt::reshape(r, {5, 2}), std::invalid_argument);
}

TEST_CASE("backward is deterministic") {
    // Two separately built graphs over the same values must accumulate bit
    // identical gradients.
    Rng rng(53);
    auto x = random_tensor({4, 4}, rng);
    auto w = random_tensor({4, 4}, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);

    auto run = [&] {
        x.zero_grad();
        w.zero_grad();
        auto h = cprompt::gelu(cprompt::matmul(x, w));
        auto y = cprompt::softmax_rows(h);
        auto loss = cprompt::mean_all(cprompt::mul(y, h));
        loss.backward();
        std::vector<double> gx = x.grad();
        std::vector<double> gw = w.grad();
        return std::make_pair(gx, gw);
    };
    auto first = run();
    auto second = run();
    CHECK(first.first == second.first);
    CHECK(first.second == second.second);
}

TEST_CASE("backward rejects non-scalar roots and non-finite losses") {
    Tensor<double> x({2, 2}, 1.0);
    x.set_requires_grad(true);
    auto y = cprompt::scale(x, 2.0);
    CHECK_THROWS_AS(y.backward(), std::invalid_argument);

    auto inf = cprompt::scale(cprompt::sum_all(x), std::numeric_limits<double>::infinity());
    CHECK_THROWS_AS(inf.backward(), std::runtime_error);
}

TEST_CASE("sgd momentum follows the velocity recurrence") {
    // Constant gradient g for two steps: net displacement is -lr*g*(1 + 1.9).
    cprompt::Tensor<double> p({3}, {1.0, 2.0, 3.0});
    p.set_requires_grad(true);
    std::vector<cprompt::Tensor<double>> params{p};
    cprompt::SgdMomentum<double> opt(0.9);
    opt.bind(params);

    const double lr = 0.1;
    const std::vector<double> g{0.5, -1.0, 2.0};
    auto apply = [&] {
        double* gp = p.ensure_grad();
        for (int i = 0; i < 3; ++i) gp[i] = g[static_cast<std::size_t>(i)];
        opt.step(params, lr);
        p.zero_grad();
    };
    const std::vector<double> before(p.data(), p.data() + 3);
    apply();
    apply();
    for (int i = 0; i < 3; ++i) {
        const double want = before[static_cast<std::size_t>(i)] -
                            lr * g[static_cast<std::size_t>(i)] * (1.0 + 1.9);
        CHECK(p.data()[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("sgd with zero gradient and empty velocity leaves params fixed") {
    cprompt::Tensor<double> p({2}, {4.0, -4.0});
    p.set_requires_grad(true);
    std::vector<cprompt::Tensor<double>> params{p};
    cprompt::SgdMomentum<double> opt(0.9);
    opt.bind(params);
    opt.step(params, 0.5);  // no grad buffer at all
    CHECK(p.data()[0] == 4.0);
    CHECK(p.data()[1] == -4.0);
    CHECK_THROWS_AS(cprompt::SgdMomentum<double>(1.0), std::invalid_argument);
}

TEST_CASE("cosine annealing endpoints and midpoint") {
    CHECK(cprompt::cosine_annealing_lr(0, 100, 0.01) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(cprompt::cosine_annealing_lr(100, 100, 0.01) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cprompt::cosine_annealing_lr(50, 100, 0.01) == doctest::Approx(0.005).epsilon(1e-12));
    CHECK_THROWS_AS(cprompt::cosine_annealing_lr(-1, 100, 0.01), std::out_of_range);
    CHECK_THROWS_AS(cprompt::cosine_annealing_lr(101, 100, 0.01), std::out_of_range);
    CHECK_THROWS_AS(cprompt::cosine_annealing_lr(0, 0, 0.01), std::invalid_argument);
}

TEST_CASE("float instantiation works with relaxed tolerances") {
    Rng rng(59);
    Tensor<float> a = Tensor<float>::randn({3, 3}, rng, 1.0);
    Tensor<float> w = Tensor<float>::randn({3, 3}, rng, 1.0);
    a.set_requires_grad(true);
    auto y = cprompt::softmax_rows(cprompt::matmul(a, w));
    auto loss = cprompt::mean_all(y);
    loss.backward();
    CHECK(a.has_grad());
    float sum = 0.0f;
    for (int r = 0; r < 3; ++r) {
        sum = 0.0f;
        for (int j = 0; j < 3; ++j) sum += y.data()[r * 3 + j];
        CHECK(std::abs(sum - 1.0f) < 1e-5f);
    }
}
