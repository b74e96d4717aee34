#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cprompt/ops.hpp"
#include "cprompt/prompt_pool.hpp"
#include "cprompt/rng.hpp"
#include "cprompt/serialize.hpp"
#include "cprompt/tensor.hpp"
#include "cprompt/vit.hpp"

namespace cprompt {

// Consistency regularizer applied to the logits of earlier classifiers:
//  - adaptive: sharpened-softmax target with a per-example temperature gate
//  - edl: uniform target on gated examples
//  - roh: fresh random one-hot target on gated examples
enum class Regularizer { adaptive, edl, roh };

struct CCLConfig {
    double tau1 = 1.15;  // sharpening temperature, > 1
    double margin = 0.1;  // gate slack, >= 0
    double alpha = 1.0;   // overall weight, >= 0

    void validate() const {
        if (!(tau1 > 1.0)) throw std::invalid_argument("CCLConfig: tau1 must exceed 1");
        if (margin < 0.0) throw std::invalid_argument("CCLConfig: margin must be non-negative");
        if (alpha < 0.0) throw std::invalid_argument("CCLConfig: alpha must be non-negative");
    }
};

// Gate and temperature for one example against one earlier task: the old
// head competes when its best logit reaches the current head's best minus the
// margin; equality counts as competing.
template <std::floating_point T>
T select_temperature(const T* old_logits, int n_old, const T* cur_logits, int n_cur,
                     const CCLConfig& cfg) {
    if (n_old <= 0 || n_cur <= 0)
        throw std::invalid_argument("select_temperature: empty logit rows");
    const T mo = *std::max_element(old_logits, old_logits + n_old);
    const T mc = *std::max_element(cur_logits, cur_logits + n_cur);
    return (static_cast<double>(mo) + cfg.margin >= static_cast<double>(mc))
               ? static_cast<T>(cfg.tau1)
               : T(1);
}

// One frozen linear head per finished task plus a throwaway auxiliary head
// for the task in progress. Head t maps features to that task's local ids.
template <std::floating_point T>
class ClassifierBank {
public:
    ClassifierBank() = default;
    explicit ClassifierBank(int embed_dim) : embed_dim_(embed_dim) {
        if (embed_dim <= 0) throw std::invalid_argument("ClassifierBank: embed_dim");
    }

    int embed_dim() const { return embed_dim_; }
    int num_heads() const { return static_cast<int>(heads_.size()); }

    void add_head(const std::vector<int>& class_ids, Rng& rng) {
        if (class_ids.empty()) throw std::invalid_argument("add_head: need classes");
        Head h;
        h.w = Tensor<T>::randn({embed_dim_, static_cast<int>(class_ids.size())}, rng, 0.02);
        h.b = Tensor<T>({static_cast<int>(class_ids.size())});
        h.w.set_requires_grad(true);
        h.b.set_requires_grad(true);
        h.class_ids = class_ids;
        heads_.push_back(std::move(h));
    }

    void freeze_head(int t) {
        auto& h = head(t);
        h.w.set_requires_grad(false);
        h.b.set_requires_grad(false);
        h.frozen = true;
    }

    bool frozen(int t) const { return head(t).frozen; }
    int classes_of(int t) const { return static_cast<int>(head(t).class_ids.size()); }
    const std::vector<int>& class_ids(int t) const { return head(t).class_ids; }

    int local_label(int t, int global) const {
        const auto& ids = head(t).class_ids;
        for (std::size_t j = 0; j < ids.size(); ++j)
            if (ids[j] == global) return static_cast<int>(j);
        throw std::out_of_range("ClassifierBank: label not in task");
    }

    Tensor<T> logits(int t, Tensor<T> h) const { return linear(h, head(t).w, head(t).b); }

    // Detached logits for gating; h is (rows, embed_dim) row-major.
    void logits_values(int t, const T* h, std::int64_t rows, T* out) const {
        const auto& hd = head(t);
        linear_values(h, rows, hd.w, hd.b, out);
    }

    Tensor<T>& head_w(int t) { return head(t).w; }
    Tensor<T>& head_b(int t) { return head(t).b; }

    // Auxiliary head for the task in progress; replaced at every task start
    // and dropped once the task finishes.
    void reset_aux(int num_classes, Rng& rng) {
        if (num_classes <= 0) throw std::invalid_argument("reset_aux: classes");
        aux_w_ = Tensor<T>::randn({embed_dim_, num_classes}, rng, 0.02);
        aux_b_ = Tensor<T>({num_classes});
        aux_w_.set_requires_grad(true);
        aux_b_.set_requires_grad(true);
        has_aux_ = true;
    }

    void drop_aux() {
        aux_w_ = Tensor<T>();
        aux_b_ = Tensor<T>();
        has_aux_ = false;
    }

    bool has_aux() const { return has_aux_; }
    Tensor<T>& aux_w() {
        require_aux();
        return aux_w_;
    }
    Tensor<T>& aux_b() {
        require_aux();
        return aux_b_;
    }

    Tensor<T> aux_logits(Tensor<T> h) const {
        require_aux();
        return linear(h, aux_w_, aux_b_);
    }

    void serialize(ByteWriter& w) const {
        w.put_i32(embed_dim_);
        w.put_u32(static_cast<std::uint32_t>(heads_.size()));
        for (const auto& h : heads_) {
            w.put_tensor(h.w);
            w.put_tensor(h.b);
            w.put_u32(static_cast<std::uint32_t>(h.class_ids.size()));
            for (int y : h.class_ids) w.put_i32(y);
            w.put_u8(h.frozen ? 1 : 0);
        }
        w.put_u8(has_aux_ ? 1 : 0);
        if (has_aux_) {
            w.put_tensor(aux_w_);
            w.put_tensor(aux_b_);
        }
    }

    static ClassifierBank deserialize(ByteReader& r) {
        ClassifierBank bank(r.get_i32());
        const auto n = r.get_u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            Head h;
            h.w = r.template get_tensor<T>();
            h.b = r.template get_tensor<T>();
            const auto nc = r.get_u32();
            h.class_ids.assign(nc, 0);
            for (auto& y : h.class_ids) y = r.get_i32();
            h.frozen = r.get_u8() != 0;
            if (h.w.ndim() != 2 || h.w.dim(0) != bank.embed_dim_ ||
                h.w.dim(1) != static_cast<int>(nc) || h.b.dim(0) != static_cast<int>(nc))
                throw std::runtime_error("ClassifierBank: corrupt checkpoint shapes");
            bank.heads_.push_back(std::move(h));
        }
        if (r.get_u8() != 0) {
            bank.aux_w_ = r.template get_tensor<T>();
            bank.aux_b_ = r.template get_tensor<T>();
            bank.has_aux_ = true;
        }
        return bank;
    }

private:
    struct Head {
        Tensor<T> w, b;
        std::vector<int> class_ids;
        bool frozen = false;
    };

    Head& head(int t) {
        if (t < 0 || t >= num_heads()) throw std::out_of_range("ClassifierBank: head index");
        return heads_[static_cast<std::size_t>(t)];
    }
    const Head& head(int t) const {
        if (t < 0 || t >= num_heads()) throw std::out_of_range("ClassifierBank: head index");
        return heads_[static_cast<std::size_t>(t)];
    }
    void require_aux() const {
        if (!has_aux_) throw std::logic_error("ClassifierBank: no auxiliary head");
    }

    int embed_dim_ = 0;
    std::vector<Head> heads_;
    Tensor<T> aux_w_, aux_b_;
    bool has_aux_ = false;
};

// Cross entropy against a fixed target distribution G (no gradient through
// G), mean-reduced over rows. With G = softmax(l / tau) row-wise this is the
// sharpened self-distillation term; its logit gradient is
// softmax(l) - softmax(l / tau), which vanishes exactly at tau = 1.
template <std::floating_point T>
Tensor<T> target_cross_entropy(Tensor<T> logits, std::vector<T> targets) {
    if (logits.ndim() != 2) throw std::invalid_argument("target_cross_entropy: rank 2 logits");
    if (static_cast<std::int64_t>(targets.size()) != logits.numel())
        throw std::invalid_argument("target_cross_entropy: target size mismatch");
    const int b = logits.dim(0);
    Tensor<T> g({logits.dim(0), logits.dim(1)}, std::move(targets));
    auto lsm = log_softmax_rows(logits);
    return scale(sum_all(mul(lsm, g)), T(-1) / static_cast<T>(b));
}

// Row-wise sharpened-softmax targets; rows with tau <= 0 become all-zero and
// contribute neither value nor gradient (used by the gated edl/roh variants).
template <std::floating_point T>
std::vector<T> sharpened_targets(const Tensor<T>& logits, const std::vector<T>& tau) {
    const int b = logits.dim(0);
    const int n = logits.dim(1);
    if (static_cast<int>(tau.size()) != b)
        throw std::invalid_argument("sharpened_targets: one temperature per row");
    std::vector<T> g(static_cast<std::size_t>(b) * n, T(0));
    for (int r = 0; r < b; ++r) {
        const T t = tau[static_cast<std::size_t>(r)];
        if (t <= T(0)) continue;
        const T* row = logits.data() + static_cast<std::int64_t>(r) * n;
        T m = row[0];
        for (int j = 1; j < n; ++j) m = std::max(m, row[j]);
        T z = T(0);
        for (int j = 0; j < n; ++j) {
            const T e = std::exp((row[j] - m) / t);
            g[static_cast<std::size_t>(r) * n + j] = e;
            z += e;
        }
        for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(r) * n + j] /= z;
    }
    return g;
}

// Adaptive entropy with a per-row temperature: mean_r CE(softmax(l_r/tau_r),
// softmax(l_r)). Temperatures enter as constants.
template <std::floating_point T>
Tensor<T> adaptive_entropy(Tensor<T> logits, const std::vector<T>& tau) {
    return target_cross_entropy(logits, sharpened_targets(logits, tau));
}

// Detached target distributions for the consistency loss, one (b, n_i) block
// per earlier task. Gradients never flow through these; computing them as
// plain values first makes that explicit and lets finite-difference checks
// probe the differentiable part with the targets held fixed.
template <std::floating_point T>
struct CCLTargets {
    std::vector<std::vector<T>> g;  // row-major (b, n_i) per earlier task
    double tau_rate = 0.0;          // fraction of (example, old task) pairs gated on
};

template <std::floating_point T>
CCLTargets<T> ccl_targets(const ClassifierBank<T>& bank, const T* h_values, std::int64_t b,
                          int current_task, const CCLConfig& cfg, Regularizer reg, Rng& rng) {
    cfg.validate();
    if (current_task < 0 || current_task >= bank.num_heads())
        throw std::out_of_range("ccl_targets: current task has no head");
    CCLTargets<T> out;
    if (current_task == 0) return out;
    const int n_cur = bank.classes_of(current_task);
    std::vector<T> cur(static_cast<std::size_t>(b) * n_cur);
    bank.logits_values(current_task, h_values, b, cur.data());

    std::int64_t gated = 0;
    for (int i = 0; i < current_task; ++i) {
        const int n_old = bank.classes_of(i);
        std::vector<T> li(static_cast<std::size_t>(b) * n_old);
        bank.logits_values(i, h_values, b, li.data());
        std::vector<T> g(li.size(), T(0));
        for (std::int64_t r = 0; r < b; ++r) {
            const T* row = li.data() + r * n_old;
            const T tau = select_temperature(row, n_old, cur.data() + r * n_cur, n_cur, cfg);
            const bool on = static_cast<double>(tau) > 1.0;
            if (on) ++gated;
            T* grow = g.data() + r * n_old;
            switch (reg) {
                case Regularizer::adaptive: {
                    // tau = 1 keeps the entropy value but cancels the gradient
                    T m = row[0];
                    for (int j = 1; j < n_old; ++j) m = std::max(m, row[j]);
                    T z = T(0);
                    for (int j = 0; j < n_old; ++j) {
                        grow[j] = std::exp((row[j] - m) / tau);
                        z += grow[j];
                    }
                    for (int j = 0; j < n_old; ++j) grow[j] /= z;
                    break;
                }
                case Regularizer::edl:
                    if (on)
                        for (int j = 0; j < n_old; ++j) grow[j] = T(1) / static_cast<T>(n_old);
                    break;
                case Regularizer::roh:
                    if (on) grow[static_cast<int>(rng.uniform_int(n_old))] = T(1);
                    break;
            }
        }
        out.g.push_back(std::move(g));
    }
    out.tau_rate = static_cast<double>(gated) / (static_cast<double>(b) * current_task);
    return out;
}

// Differentiable half of the consistency loss: mean target cross entropy per
// earlier head against the fixed targets, averaged over earlier tasks and
// scaled by alpha. Old heads are frozen, so the gradient reaches only h (and
// through it the current prompt).
template <std::floating_point T>
Tensor<T> ccl_loss_from_targets(const ClassifierBank<T>& bank, Tensor<T> h, int current_task,
                                const CCLTargets<T>& targets, double alpha) {
    if (current_task == 0) return Tensor<T>::scalar(T(0));
    if (static_cast<int>(targets.g.size()) != current_task)
        throw std::invalid_argument("ccl_loss_from_targets: one target block per earlier task");
    Tensor<T> acc;
    for (int i = 0; i < current_task; ++i) {
        auto term = target_cross_entropy(bank.logits(i, h), targets.g[static_cast<std::size_t>(i)]);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, static_cast<T>(alpha / current_task));
}

template <std::floating_point T>
struct CCLResult {
    Tensor<T> loss;         // scalar; zero constant when no earlier task exists
    double tau_rate = 0.0;  // fraction of (example, old task) pairs gated on
};

// Consistency loss over all earlier heads, evaluated on the current-prompt
// features. The gate compares each old head's best logit with the current
// head's best logit; both sides are detached.
template <std::floating_point T>
CCLResult<T> ccl_loss(const ClassifierBank<T>& bank, Tensor<T> h, int current_task,
                      const CCLConfig& cfg, Regularizer reg, Rng& rng) {
    auto targets = ccl_targets(bank, h.data(), h.dim(0), current_task, cfg, reg, rng);
    CCLResult<T> out;
    out.loss = ccl_loss_from_targets(bank, h, current_task, targets, cfg.alpha);
    out.tau_rate = targets.tau_rate;
    return out;
}

// Switches for the composed training objective. Key matching is always part
// of training; prompt/key counts are fixed at pool construction.
struct LossFlags {
    bool enable_ccl = true;
    bool enable_pcl = true;       // train the current head through sampled prompts
    bool enable_aux_head = true;  // false: route the auxiliary term to the current head
    bool enable_aux_loss = true;  // false: no auxiliary term at all
    Regularizer regularizer = Regularizer::adaptive;
    bool per_example_sampling = false;  // sample a prompt per example instead of per batch
};

template <std::floating_point T>
struct LossBreakdown {
    Tensor<T> total;  // scalar, carries the graph
    double ccl = 0.0;
    double ce = 0.0;
    double aux = 0.0;
    double mk = 0.0;
    double tau_rate = 0.0;
    int sampled_task = -1;  // -1 when sampling is off or per-example
};

// Full training objective for one batch of the current task. The consistency
// targets are recomputed from the live features unless the caller pins them;
// pinning reproduces the stop-gradient semantics under finite differences.
template <std::floating_point T>
LossBreakdown<T> total_loss(const Backbone<T>& net, const PromptPool<T>& pool,
                            ClassifierBank<T>& bank, const Tensor<T>& images,
                            const std::vector<int>& global_labels, int current_task,
                            const CCLConfig& ccl_cfg, const LossFlags& flags, Rng& rng,
                            const CCLTargets<T>* pinned_ccl = nullptr) {
    if (pool.num_tasks() != bank.num_heads())
        throw std::invalid_argument("total_loss: pool and bank disagree on task count");
    if (current_task != pool.num_tasks() - 1)
        throw std::invalid_argument("total_loss: can only train the newest task");
    const std::int64_t b = images.dim(0);
    if (static_cast<std::int64_t>(global_labels.size()) != b)
        throw std::invalid_argument("total_loss: label count mismatch");

    std::vector<int> local;
    local.reserve(global_labels.size());
    for (int y : global_labels) local.push_back(bank.local_label(current_task, y));

    LossBreakdown<T> out;
    auto h = net.forward_with_prompt(images, pool.task(current_task).prompt);

    // Cross entropy for the current head, optionally through a sampled prompt.
    Tensor<T> ce_term;
    if (!flags.enable_pcl) {
        ce_term = cross_entropy(bank.logits(current_task, h), local);
    } else if (!flags.per_example_sampling) {
        const int sampled = pool.sample_task(rng);
        out.sampled_task = sampled;
        auto hs = sampled == current_task ? h
                                          : net.forward_with_prompt(images, pool.task(sampled).prompt);
        ce_term = cross_entropy(bank.logits(current_task, hs), local);
    } else {
        // Group the batch by sampled prompt and weight each group's mean CE
        // by its share of the batch.
        std::vector<std::vector<std::int64_t>> groups(static_cast<std::size_t>(pool.num_tasks()));
        for (std::int64_t r = 0; r < b; ++r)
            groups[static_cast<std::size_t>(pool.sample_task(rng))].push_back(r);
        for (int i = 0; i < pool.num_tasks(); ++i) {
            const auto& rows = groups[static_cast<std::size_t>(i)];
            if (rows.empty()) continue;
            Tensor<T> sub({static_cast<int>(rows.size()), images.dim(1)});
            std::vector<int> sub_local;
            for (std::size_t k = 0; k < rows.size(); ++k) {
                std::copy(images.data() + rows[k] * images.dim(1),
                          images.data() + (rows[k] + 1) * images.dim(1),
                          sub.data() + static_cast<std::int64_t>(k) * images.dim(1));
                sub_local.push_back(local[static_cast<std::size_t>(rows[k])]);
            }
            auto hi = net.forward_with_prompt(sub, pool.task(i).prompt);
            auto ce_i = scale(cross_entropy(bank.logits(current_task, hi), sub_local),
                              static_cast<T>(rows.size()) / static_cast<T>(b));
            ce_term = ce_term.defined() ? add(ce_term, ce_i) : ce_i;
        }
    }
    out.ce = ce_term.item();
    Tensor<T> total = ce_term;

    // Auxiliary term, always on own-prompt features.
    if (flags.enable_pcl && flags.enable_aux_loss) {
        auto aux_logits = flags.enable_aux_head ? bank.aux_logits(h) : bank.logits(current_task, h);
        auto aux_term = cross_entropy(aux_logits, local);
        out.aux = aux_term.item();
        total = add(total, aux_term);
    }

    // Key matching on frozen query features.
    auto q = net.forward_query(images);
    auto mk_term = pool.multi_key_loss(q, global_labels);
    out.mk = mk_term.item();
    total = add(total, mk_term);

    if (flags.enable_ccl) {
        const auto targets =
            pinned_ccl ? *pinned_ccl
                       : ccl_targets(bank, h.data(), b, current_task, ccl_cfg,
                                     flags.regularizer, rng);
        auto ccl = ccl_loss_from_targets(bank, h, current_task, targets, ccl_cfg.alpha);
        out.ccl = ccl.item();
        out.tau_rate = targets.tau_rate;
        if (current_task > 0) total = add(total, ccl);
    }

    out.total = total;
    return out;
}

}  // namespace cprompt
