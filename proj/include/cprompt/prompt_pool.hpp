#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "cprompt/ops.hpp"
#include "cprompt/rng.hpp"
#include "cprompt/serialize.hpp"
#include "cprompt/tensor.hpp"

namespace cprompt {

// One expandable prompt per task plus its matching keys. In multi-key mode a
// task holds one key per class; in one-key mode a single key represents the
// whole task. Keys live in the query feature space and are matched by cosine
// similarity.
template <std::floating_point T>
struct TaskPrompt {
    Tensor<T> prompt;              // (prompt_len, embed_dim)
    Tensor<T> keys;                // (num_keys, embed_dim)
    std::vector<int> class_labels;  // global ids covered by this task
    bool frozen = false;

    int num_keys() const { return keys.dim(0); }
};

template <std::floating_point T>
class PromptPool {
public:
    PromptPool() = default;
    PromptPool(int prompt_len, int embed_dim, bool multi_key)
        : prompt_len_(prompt_len), embed_dim_(embed_dim), multi_key_(multi_key) {
        if (prompt_len <= 0 || embed_dim <= 0)
            throw std::invalid_argument("PromptPool: dims must be positive");
    }

    int num_tasks() const { return static_cast<int>(tasks_.size()); }
    bool multi_key() const { return multi_key_; }
    int prompt_len() const { return prompt_len_; }
    int embed_dim() const { return embed_dim_; }

    TaskPrompt<T>& task(int t) {
        check_task(t);
        return tasks_[static_cast<std::size_t>(t)];
    }
    const TaskPrompt<T>& task(int t) const {
        check_task(t);
        return tasks_[static_cast<std::size_t>(t)];
    }

    // New trainable prompt (gaussian) and keys (random unit rows). Class ids
    // must be new to the pool; one key per class, or a single key when the
    // pool runs in one-key mode.
    void add_task(const std::vector<int>& class_ids, Rng& rng) {
        if (class_ids.empty()) throw std::invalid_argument("add_task: task needs classes");
        for (int y : class_ids)
            if (label_to_task_.count(y))
                throw std::invalid_argument("add_task: class id already owned by another task");
        TaskPrompt<T> tp;
        tp.prompt = Tensor<T>::randn({prompt_len_, embed_dim_}, rng, 0.02);
        const int nk = multi_key_ ? static_cast<int>(class_ids.size()) : 1;
        tp.keys = Tensor<T>({nk, embed_dim_});
        for (int j = 0; j < nk; ++j) {
            T* row = tp.keys.data() + static_cast<std::int64_t>(j) * embed_dim_;
            T norm2 = T(0);
            do {
                norm2 = T(0);
                for (int c = 0; c < embed_dim_; ++c) {
                    row[c] = static_cast<T>(rng.normal());
                    norm2 += row[c] * row[c];
                }
            } while (static_cast<double>(norm2) < 1e-8);
            const T inv = T(1) / std::sqrt(norm2);
            for (int c = 0; c < embed_dim_; ++c) row[c] *= inv;
        }
        tp.class_labels = class_ids;
        tp.prompt.set_requires_grad(true);
        tp.keys.set_requires_grad(true);
        const int t = num_tasks();
        for (std::size_t j = 0; j < class_ids.size(); ++j) {
            label_to_task_[class_ids[j]] = t;
            label_to_key_[class_ids[j]] = multi_key_ ? static_cast<int>(j) : 0;
        }
        tasks_.push_back(std::move(tp));
    }

    void freeze_task(int t) {
        auto& tp = task(t);
        tp.prompt.set_requires_grad(false);
        tp.keys.set_requires_grad(false);
        tp.frozen = true;
    }

    int task_of_label(int y) const {
        auto it = label_to_task_.find(y);
        if (it == label_to_task_.end()) throw std::out_of_range("PromptPool: unknown class id");
        return it->second;
    }

    // Training-time prompt index: uniform over the tasks seen so far.
    int sample_task(Rng& rng) const {
        if (tasks_.empty()) throw std::logic_error("sample_task: empty pool");
        return static_cast<int>(rng.uniform_int(num_tasks()));
    }

    // Highest cosine similarity across every key of every task; ties resolve
    // to the lowest (task, key) pair. Pure value computation, no graph.
    int select(const T* q) const {
        if (tasks_.empty()) throw std::logic_error("select: empty pool");
        int best_task = 0;
        double best = -2.0;
        double qn = 0;
        for (int c = 0; c < embed_dim_; ++c) qn += static_cast<double>(q[c]) * q[c];
        qn = std::sqrt(qn);
        if (qn < kCosineNormFloor) throw std::invalid_argument("select: zero-norm query");
        for (int t = 0; t < num_tasks(); ++t) {
            const auto& tp = tasks_[static_cast<std::size_t>(t)];
            for (int j = 0; j < tp.num_keys(); ++j) {
                const T* k = tp.keys.data() + static_cast<std::int64_t>(j) * embed_dim_;
                double dot = 0, kn = 0;
                for (int c = 0; c < embed_dim_; ++c) {
                    dot += static_cast<double>(q[c]) * k[c];
                    kn += static_cast<double>(k[c]) * k[c];
                }
                kn = std::sqrt(kn);
                if (kn < kCosineNormFloor) throw std::invalid_argument("select: zero-norm key");
                const double sim = dot / (qn * kn);
                if (sim > best) {
                    best = sim;
                    best_task = t;
                }
            }
        }
        return best_task;
    }

    std::vector<int> select_batch(const Tensor<T>& q) const {
        if (q.ndim() != 2 || q.dim(1) != embed_dim_)
            throw std::invalid_argument("select_batch: expected (b, embed_dim)");
        std::vector<int> out(static_cast<std::size_t>(q.dim(0)));
        for (int i = 0; i < q.dim(0); ++i)
            out[static_cast<std::size_t>(i)] = select(q.data() + static_cast<std::int64_t>(i) * embed_dim_);
        return out;
    }

    double selection_accuracy(const Tensor<T>& q, const std::vector<int>& true_task) const {
        auto picked = select_batch(q);
        if (picked.size() != true_task.size())
            throw std::invalid_argument("selection_accuracy: size mismatch");
        if (picked.empty()) return 0.0;
        std::int64_t hit = 0;
        for (std::size_t i = 0; i < picked.size(); ++i)
            if (picked[i] == true_task[i]) ++hit;
        return static_cast<double>(hit) / static_cast<double>(picked.size());
    }

    // Pull-to-key objective: softmax cross entropy over the cosine scores of
    // every key in the pool, targeting each example's own key. Queries enter
    // as constants; frozen tasks contribute score columns but take no
    // gradient, so only the newest keys move.
    Tensor<T> multi_key_loss(const Tensor<T>& q, const std::vector<int>& labels) const {
        if (tasks_.empty()) throw std::logic_error("multi_key_loss: empty pool");
        if (q.ndim() != 2 || q.dim(1) != embed_dim_)
            throw std::invalid_argument("multi_key_loss: expected (b, embed_dim)");
        if (static_cast<std::int64_t>(labels.size()) != q.dim(0))
            throw std::invalid_argument("multi_key_loss: label count mismatch");
        auto q_const = stop_gradient(q);
        std::vector<Tensor<T>> scores;
        std::vector<int> offsets(tasks_.size(), 0);
        int total = 0;
        for (int t = 0; t < num_tasks(); ++t) {
            offsets[static_cast<std::size_t>(t)] = total;
            scores.push_back(cosine_qk(q_const, tasks_[static_cast<std::size_t>(t)].keys));
            total += tasks_[static_cast<std::size_t>(t)].num_keys();
        }
        std::vector<int> columns;
        columns.reserve(labels.size());
        for (int y : labels) {
            const int t = task_of_label(y);
            columns.push_back(offsets[static_cast<std::size_t>(t)] + label_to_key_.at(y));
        }
        auto all = scores.size() == 1 ? scores.front() : concat_cols(scores);
        return cross_entropy(all, columns);
    }

    void serialize(ByteWriter& w) const {
        w.put_i32(prompt_len_);
        w.put_i32(embed_dim_);
        w.put_u8(multi_key_ ? 1 : 0);
        w.put_u32(static_cast<std::uint32_t>(tasks_.size()));
        for (const auto& tp : tasks_) {
            w.put_tensor(tp.prompt);
            w.put_tensor(tp.keys);
            w.put_u32(static_cast<std::uint32_t>(tp.class_labels.size()));
            for (int y : tp.class_labels) w.put_i32(y);
            w.put_u8(tp.frozen ? 1 : 0);
        }
    }

    static PromptPool deserialize(ByteReader& r) {
        const int plen = r.get_i32();
        const int dim = r.get_i32();
        const bool multi = r.get_u8() != 0;
        PromptPool pool(plen, dim, multi);
        const auto n = r.get_u32();
        for (std::uint32_t i = 0; i < n; ++i) {
            TaskPrompt<T> tp;
            tp.prompt = r.template get_tensor<T>();
            tp.keys = r.template get_tensor<T>();
            const auto nc = r.get_u32();
            tp.class_labels.assign(nc, 0);
            for (auto& y : tp.class_labels) y = r.get_i32();
            tp.frozen = r.get_u8() != 0;
            if (tp.prompt.ndim() != 2 || tp.prompt.dim(0) != plen || tp.prompt.dim(1) != dim ||
                tp.keys.ndim() != 2 || tp.keys.dim(1) != dim)
                throw std::runtime_error("PromptPool: corrupt checkpoint shapes");
            const int t = pool.num_tasks();
            for (std::size_t j = 0; j < tp.class_labels.size(); ++j) {
                const int y = tp.class_labels[j];
                if (pool.label_to_task_.count(y))
                    throw std::runtime_error("PromptPool: duplicate class id in checkpoint");
                pool.label_to_task_[y] = t;
                pool.label_to_key_[y] = multi ? static_cast<int>(j) : 0;
            }
            pool.tasks_.push_back(std::move(tp));
        }
        return pool;
    }

private:
    void check_task(int t) const {
        if (t < 0 || t >= num_tasks()) throw std::out_of_range("PromptPool: task index");
    }

    int prompt_len_ = 0;
    int embed_dim_ = 0;
    bool multi_key_ = true;
    std::vector<TaskPrompt<T>> tasks_;
    std::unordered_map<int, int> label_to_task_;
    std::unordered_map<int, int> label_to_key_;
};

}  // namespace cprompt
