#pragma once

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cprompt/data.hpp"
#include "cprompt/objectives.hpp"
#include "cprompt/prompt_pool.hpp"
#include "cprompt/tensor.hpp"
#include "cprompt/vit.hpp"

namespace cprompt {

// Lower-triangular accuracy record: a[t][j] is accuracy on task j's test set
// measured right after training task t. Weights are class counts per task.
struct AccuracyMatrix {
    std::vector<std::vector<double>> a;
    std::vector<int> task_classes;

    int num_rows() const { return static_cast<int>(a.size()); }

    void add_row(std::vector<double> row, int classes_in_new_task) {
        if (static_cast<int>(row.size()) != num_rows() + 1)
            throw std::invalid_argument("AccuracyMatrix: row t must cover tasks 0..t");
        for (double v : row)
            if (v < 0.0 || v > 1.0)
                throw std::invalid_argument("AccuracyMatrix: accuracy outside [0,1]");
        if (classes_in_new_task <= 0)
            throw std::invalid_argument("AccuracyMatrix: class count must be positive");
        a.push_back(std::move(row));
        task_classes.push_back(classes_in_new_task);
    }

    void require_complete() const {
        if (a.empty()) throw std::invalid_argument("AccuracyMatrix: empty");
        for (int t = 0; t < num_rows(); ++t)
            if (static_cast<int>(a[static_cast<std::size_t>(t)].size()) != t + 1)
                throw std::invalid_argument("AccuracyMatrix: ragged rows");
    }
};

// Class-count-weighted accuracy of one row (tasks 0..t pooled).
inline double row_weighted_accuracy(const AccuracyMatrix& m, int t) {
    m.require_complete();
    if (t < 0 || t >= m.num_rows()) throw std::out_of_range("row_weighted_accuracy: row");
    double num = 0.0, den = 0.0;
    for (int j = 0; j <= t; ++j) {
        const double w = m.task_classes[static_cast<std::size_t>(j)];
        num += w * m.a[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
        den += w;
    }
    return num / den;
}

// Accuracy over all classes after the final task.
inline double last_acc(const AccuracyMatrix& m) {
    m.require_complete();
    return row_weighted_accuracy(m, m.num_rows() - 1);
}

// Mean of the row accuracies over the incremental steps.
inline double avg_acc(const AccuracyMatrix& m) {
    m.require_complete();
    double s = 0.0;
    for (int t = 0; t < m.num_rows(); ++t) s += row_weighted_accuracy(m, t);
    return s / m.num_rows();
}

// Mean over the non-final tasks of (peak historical accuracy - final
// accuracy). Negative values mean late improvement and are allowed.
inline double forgetting_ff(const AccuracyMatrix& m) {
    m.require_complete();
    const int T = m.num_rows();
    if (T < 2) throw std::invalid_argument("forgetting_ff: needs at least two tasks");
    double s = 0.0;
    for (int j = 0; j + 1 < T; ++j) {
        double peak = 0.0;
        for (int i = j; i + 1 < T; ++i)
            peak = std::max(peak, m.a[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
        s += peak - m.a[static_cast<std::size_t>(T - 1)][static_cast<std::size_t>(j)];
    }
    return s / (T - 1);
}

namespace detail {

// Features for a row subset under one prompt, graph-free: the prompt enters
// through a detached copy so evaluation never records a tape.
template <std::floating_point T>
Tensor<T> prompted_features(const Backbone<T>& net, const PromptPool<T>& pool,
                            const Tensor<T>& images, const std::vector<std::int64_t>& rows,
                            int prompt_idx) {
    const int dim = images.dim(1);
    Tensor<T> sub({static_cast<int>(rows.size()), dim});
    for (std::size_t k = 0; k < rows.size(); ++k)
        std::copy(images.data() + rows[k] * dim, images.data() + (rows[k] + 1) * dim,
                  sub.data() + static_cast<std::int64_t>(k) * dim);
    return net.forward_with_prompt(sub, stop_gradient(pool.task(prompt_idx).prompt));
}

// Concatenated-head argmax per feature row, mapped to global ids; equal
// scores resolve to the lowest column, i.e. the earliest task and class.
template <std::floating_point T>
void classify_rows(const ClassifierBank<T>& bank, const Tensor<T>& h,
                   const std::vector<std::int64_t>& rows, std::vector<int>& out) {
    const std::int64_t n = h.dim(0);
    std::vector<int> col_to_global;
    for (int t = 0; t < bank.num_heads(); ++t)
        for (int y : bank.class_ids(t)) col_to_global.push_back(y);
    const int total = static_cast<int>(col_to_global.size());
    std::vector<T> logits(static_cast<std::size_t>(n) * total);
    int off = 0;
    std::vector<T> buf;
    for (int t = 0; t < bank.num_heads(); ++t) {
        const int nt = bank.classes_of(t);
        buf.assign(static_cast<std::size_t>(n) * nt, T(0));
        bank.logits_values(t, h.data(), n, buf.data());
        for (std::int64_t r = 0; r < n; ++r)
            std::copy(buf.data() + r * nt, buf.data() + (r + 1) * nt,
                      logits.data() + r * total + off);
        off += nt;
    }
    for (std::int64_t r = 0; r < n; ++r) {
        const T* row = logits.data() + r * total;
        int arg = 0;
        for (int c = 1; c < total; ++c)
            if (row[c] > row[arg]) arg = c;
        out[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])] =
            col_to_global[static_cast<std::size_t>(arg)];
    }
}

}  // namespace detail

// Class-incremental prediction: the query picks a prompt per example, the
// prompted features are scored by every head at once, and the best global
// class wins. Examples sharing a selected prompt share one forward pass.
template <std::floating_point T>
std::vector<int> predict_cil(const Backbone<T>& net, const PromptPool<T>& pool,
                             const ClassifierBank<T>& bank, const Tensor<T>& images) {
    if (pool.num_tasks() == 0) throw std::logic_error("predict_cil: nothing trained");
    if (pool.num_tasks() != bank.num_heads())
        throw std::invalid_argument("predict_cil: pool and bank disagree");
    auto q = net.forward_query(images);
    auto sel = pool.select_batch(q);
    const std::int64_t b = images.dim(0);
    std::vector<int> out(static_cast<std::size_t>(b), -1);
    for (int i = 0; i < pool.num_tasks(); ++i) {
        std::vector<std::int64_t> rows;
        for (std::int64_t r = 0; r < b; ++r)
            if (sel[static_cast<std::size_t>(r)] == i) rows.push_back(r);
        if (rows.empty()) continue;
        auto h = detail::prompted_features(net, pool, images, rows, i);
        detail::classify_rows(bank, h, rows, out);
    }
    return out;
}

// Like predict_cil with the prompt selection overridden to a fixed index.
template <std::floating_point T>
std::vector<int> predict_fixed_prompt(const Backbone<T>& net, const PromptPool<T>& pool,
                                      const ClassifierBank<T>& bank, const Tensor<T>& images,
                                      int forced) {
    if (forced < 0 || forced >= pool.num_tasks())
        throw std::out_of_range("predict_fixed_prompt: unknown prompt index");
    const std::int64_t b = images.dim(0);
    std::vector<std::int64_t> rows(static_cast<std::size_t>(b));
    for (std::int64_t r = 0; r < b; ++r) rows[static_cast<std::size_t>(r)] = r;
    std::vector<int> out(static_cast<std::size_t>(b), -1);
    auto h = detail::prompted_features(net, pool, images, rows, forced);
    detail::classify_rows(bank, h, rows, out);
    return out;
}

// Task-incremental prediction: true prompt, own head only.
template <std::floating_point T>
std::vector<int> predict_til(const Backbone<T>& net, const PromptPool<T>& pool,
                             const ClassifierBank<T>& bank, const Tensor<T>& images,
                             int true_task) {
    if (true_task < 0 || true_task >= pool.num_tasks())
        throw std::out_of_range("predict_til: unknown task id");
    const std::int64_t b = images.dim(0);
    std::vector<std::int64_t> rows(static_cast<std::size_t>(b));
    for (std::int64_t r = 0; r < b; ++r) rows[static_cast<std::size_t>(r)] = r;
    auto h = detail::prompted_features(net, pool, images, rows, true_task);
    const int nt = bank.classes_of(true_task);
    std::vector<T> buf(static_cast<std::size_t>(b) * nt);
    bank.logits_values(true_task, h.data(), b, buf.data());
    std::vector<int> out(static_cast<std::size_t>(b));
    for (std::int64_t r = 0; r < b; ++r) {
        const T* row = buf.data() + r * nt;
        int arg = 0;
        for (int c = 1; c < nt; ++c)
            if (row[c] > row[arg]) arg = c;
        out[static_cast<std::size_t>(r)] = bank.class_ids(true_task)[static_cast<std::size_t>(arg)];
    }
    return out;
}

enum class EvalMode { cil, til, fixed_prompt };

// Accuracy of one dataset under the chosen inference mode, batched.
template <std::floating_point T>
double evaluate_accuracy(const Backbone<T>& net, const PromptPool<T>& pool,
                         const ClassifierBank<T>& bank, const Dataset<T>& ds, EvalMode mode,
                         int task_or_forced = -1, int eval_batch = 64) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
    std::int64_t hit = 0;
    for (std::int64_t start = 0; start < ds.size(); start += eval_batch) {
        const auto end = std::min<std::int64_t>(start + eval_batch, ds.size());
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < end; ++i) idx.push_back(i);
        auto [batch, labels] = make_batch(ds, idx);
        std::vector<int> pred;
        switch (mode) {
            case EvalMode::cil:
                pred = predict_cil(net, pool, bank, batch);
                break;
            case EvalMode::til:
                pred = predict_til(net, pool, bank, batch, task_or_forced);
                break;
            case EvalMode::fixed_prompt:
                pred = predict_fixed_prompt(net, pool, bank, batch, task_or_forced);
                break;
        }
        for (std::size_t r = 0; r < labels.size(); ++r)
            if (pred[r] == labels[r]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(ds.size());
}

// Fraction of examples whose query picks the ground-truth task's prompt.
template <std::floating_point T>
double task_selection_accuracy(const Backbone<T>& net, const PromptPool<T>& pool,
                               const Dataset<T>& ds, int true_task, int eval_batch = 64) {
    if (ds.size() == 0) throw std::invalid_argument("task_selection_accuracy: empty dataset");
    std::int64_t hit = 0;
    for (std::int64_t start = 0; start < ds.size(); start += eval_batch) {
        const auto end = std::min<std::int64_t>(start + eval_batch, ds.size());
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < end; ++i) idx.push_back(i);
        auto [batch, labels] = make_batch(ds, idx);
        auto q = net.forward_query(batch);
        for (int s : pool.select_batch(q))
            if (s == true_task) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(ds.size());
}

// Wrong-prompt robustness: accuracy under the first task's prompt, averaged
// with equal weight over tasks 2..T. Defined only for multi-task streams.
template <std::floating_point T>
double fixed_prompt_probe(const Backbone<T>& net, const PromptPool<T>& pool,
                          const ClassifierBank<T>& bank, const TaskStream<T>& stream) {
    if (stream.num_tasks() < 2 || pool.num_tasks() < 2)
        throw std::invalid_argument("fixed_prompt_probe: needs at least two tasks");
    double s = 0.0;
    for (int t = 1; t < stream.num_tasks(); ++t)
        s += evaluate_accuracy(net, pool, bank, stream.task(t).test, EvalMode::fixed_prompt, 0);
    return s / (stream.num_tasks() - 1);
}

}  // namespace cprompt
