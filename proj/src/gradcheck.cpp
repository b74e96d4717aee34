#include "gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <vector>

#include "cprompt/objectives.hpp"
#include "cprompt/vit.hpp"

namespace cprompt {

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::vector<double> softmax_values(const std::vector<double>& v, double tau) {
    double m = v[0] / tau;
    for (double x : v) m = std::max(m, x / tau);
    std::vector<double> p(v.size());
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        p[i] = std::exp(v[i] / tau - m);
        z += p[i];
    }
    for (auto& x : p) x /= z;
    return p;
}

template <typename MakeLoss>
double max_fd_err(Tensor<double>& param, MakeLoss make_loss, double h) {
    param.zero_grad();
    auto loss = make_loss();
    loss.backward();
    std::vector<double> analytic(static_cast<std::size_t>(param.numel()), 0.0);
    if (param.has_grad()) analytic = param.grad();
    double worst = 0.0;
    for (std::int64_t i = 0; i < param.numel(); ++i) {
        const double orig = param.data()[i];
        param.data()[i] = orig + h;
        const double lp = make_loss().item();
        param.data()[i] = orig - h;
        const double lm = make_loss().item();
        param.data()[i] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double a = analytic[static_cast<std::size_t>(i)];
        worst = std::max(worst, std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)}));
    }
    param.zero_grad();
    return worst;
}

}  // namespace

GradcheckResult gradcheck_sharpening_identity() {
    const auto t0 = clock_type::now();
    Rng rng(20240305);
    const std::vector<double> temperatures{1.02, 1.15, 1.2};
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + trial % 19;
        auto logits = Tensor<double>::randn({1, n}, rng, 2.0);
        logits.set_requires_grad(true);
        const std::vector<double> vals(logits.data(), logits.data() + n);
        for (double tau : temperatures) {
            const auto targets = softmax_values(vals, tau);
            // autodiff vs the closed form softmax(l) - softmax(l/tau)
            logits.zero_grad();
            auto loss = target_cross_entropy(logits, targets);
            loss.backward();
            const auto p = softmax_values(vals, 1.0);
            const auto& g = logits.grad();
            for (int i = 0; i < n; ++i) {
                const double closed = p[static_cast<std::size_t>(i)] -
                                      targets[static_cast<std::size_t>(i)];
                const double a = g[static_cast<std::size_t>(i)];
                worst = std::max(worst, std::abs(a - closed) /
                                            std::max({1.0, std::abs(a), std::abs(closed)}));
            }
            // autodiff vs central differences with the targets held fixed
            auto make_loss = [&]() { return target_cross_entropy(logits, targets); };
            worst = std::max(worst, max_fd_err(logits, make_loss, 1e-6));
        }
    }
    return {worst < 1e-6, worst, seconds_since(t0)};
}

GradcheckResult gradcheck_tau1_nullity() {
    const auto t0 = clock_type::now();
    Rng rng(77);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 2 + trial % 19;
        auto logits = Tensor<double>::randn({1, n}, rng, 3.0);
        logits.set_requires_grad(true);
        auto loss = adaptive_entropy(logits, std::vector<double>{1.0});
        loss.backward();
        if (logits.has_grad())
            for (double g : logits.grad()) worst = std::max(worst, std::abs(g));
    }
    return {worst <= 1e-12, worst, seconds_since(t0)};
}

GradcheckResult gradcheck_full_loss() {
    const auto t0 = clock_type::now();

    BackboneConfig bc;
    bc.image_size = 4;
    bc.patch_size = 2;
    bc.channels = 1;
    bc.embed_dim = 8;
    bc.num_layers = 2;
    bc.num_heads = 2;
    bc.mlp_ratio = 2;
    bc.prompt_len = 2;
    bc.prompt_insert_layers = {1, 2};

    Rng rng(4242);
    Backbone<double> net(bc, rng);
    net.freeze();
    PromptPool<double> pool(bc.prompt_len, bc.embed_dim, true);
    ClassifierBank<double> bank(bc.embed_dim);
    pool.add_task({0, 1}, rng);
    bank.add_head({0, 1}, rng);
    pool.freeze_task(0);
    bank.freeze_head(0);
    pool.add_task({2, 3}, rng);
    bank.add_head({2, 3}, rng);
    bank.reset_aux(2, rng);

    const int image_dim = bc.channels * bc.image_size * bc.image_size;
    auto images = Tensor<double>::randn({4, image_dim}, rng, 1.0);
    const std::vector<int> labels{2, 3, 3, 2};
    CCLConfig ccl;
    LossFlags flags;

    // Pin the detached consistency targets at the base point and fix the
    // prompt sampler per evaluation; the quotient then probes the live graph,
    // which is what the gradient is defined over.
    auto h0 = net.forward_with_prompt(images, pool.task(1).prompt);
    Rng tmp(1);
    auto pinned = ccl_targets(bank, h0.data(), 4, 1, ccl, flags.regularizer, tmp);
    auto make_loss = [&]() {
        Rng sampler(99);
        return total_loss(net, pool, bank, images, labels, 1, ccl, flags, sampler, &pinned).total;
    };

    double worst = 0.0;
    std::vector<Tensor<double>> trainable{pool.task(1).prompt, pool.task(1).keys,
                                          bank.head_w(1),      bank.head_b(1),
                                          bank.aux_w(),        bank.aux_b()};
    for (auto& p : trainable) worst = std::max(worst, max_fd_err(p, make_loss, 1e-5));
    return {worst < 1e-5, worst, seconds_since(t0)};
}

bool run_gradcheck(std::ostream& out) {
    bool ok = true;
    auto line = [&](const char* what, const GradcheckResult& r, const char* metric) {
        out << "[gradcheck] " << what << ": " << metric << " " << r.max_err << " ("
            << r.seconds << " s) " << (r.pass ? "PASS" : "FAIL") << "\n";
        ok = ok && r.pass;
    };
    line("sharpening gradient identity", gradcheck_sharpening_identity(), "max scaled err");
    line("tau=1 gradient nullity", gradcheck_tau1_nullity(), "max |grad|");
    line("composed loss finite differences", gradcheck_full_loss(), "max scaled err");
    return ok;
}

}  // namespace cprompt
