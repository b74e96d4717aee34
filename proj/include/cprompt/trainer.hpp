#pragma once

#include <chrono>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cprompt/data.hpp"
#include "cprompt/eval.hpp"
#include "cprompt/objectives.hpp"
#include "cprompt/optim.hpp"
#include "cprompt/prompt_pool.hpp"
#include "cprompt/serialize.hpp"
#include "cprompt/tensor.hpp"
#include "cprompt/version.hpp"
#include "cprompt/vit.hpp"

namespace cprompt {

struct TrainConfig {
    int epochs_per_task = 10;
    int batch_size = 16;
    double lr0 = 0.01;
    double momentum = 0.9;
    CCLConfig ccl;
    LossFlags flags;
    bool enable_mk = true;  // one key per class; false: one key per task

    void validate() const {
        if (epochs_per_task < 1) throw std::invalid_argument("TrainConfig: epochs_per_task >= 1");
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size >= 1");
        if (lr0 <= 0.0) throw std::invalid_argument("TrainConfig: lr0 must be positive");
        if (momentum < 0.0 || momentum >= 1.0)
            throw std::invalid_argument("TrainConfig: momentum in [0, 1)");
        ccl.validate();
    }
};

struct StepRecord {
    int step = 0;
    double total = 0, ccl = 0, ce = 0, aux = 0, mk = 0, tau_rate = 0;
};

struct TaskLog {
    int task = 0;
    int epochs = 0;
    std::vector<StepRecord> steps;
    double first_epoch_mean_loss = 0.0;
    double last_epoch_mean_loss = 0.0;
    double wall_seconds = 0.0;  // reporting only; never feeds deterministic outputs
};

template <std::floating_point T>
struct ExperimentState {
    Backbone<T> backbone;
    PromptPool<T> pool;
    ClassifierBank<T> bank;
    SgdMomentum<T> opt;
    Rng rng;
    int current_task = -1;  // task currently open for training, -1 before the first
    int total_tasks = 0;

    static ExperimentState make(Backbone<T> net, const TrainConfig& cfg, int total_tasks,
                                Rng rng_state) {
        cfg.validate();
        if (!net.frozen()) throw std::invalid_argument("ExperimentState: backbone must be frozen");
        const int d = net.config().embed_dim;
        const int plen = net.config().prompt_len;
        ExperimentState st{std::move(net), PromptPool<T>(plen, d, cfg.enable_mk),
                           ClassifierBank<T>(d), SgdMomentum<T>(cfg.momentum),
                           std::move(rng_state), -1, total_tasks};
        return st;
    }

    // Every parameter that currently carries requires_grad, in optimizer
    // binding order: {P_t, keys_t, C_t, C_aux?}.
    std::vector<Tensor<T>> trainable_params() {
        std::vector<Tensor<T>> out;
        if (current_task < 0) return out;
        out.push_back(pool.task(current_task).prompt);
        out.push_back(pool.task(current_task).keys);
        out.push_back(bank.head_w(current_task));
        out.push_back(bank.head_b(current_task));
        if (bank.has_aux()) {
            out.push_back(bank.aux_w());
            out.push_back(bank.aux_b());
        }
        return out;
    }
};

// Grows the pool and bank for the next task and rebinds the optimizer. The
// auxiliary head exists only while its task trains, and only when the
// sampled-prompt machinery plus the auxiliary loss are both enabled.
template <std::floating_point T>
void start_task(ExperimentState<T>& st, const std::vector<int>& class_ids,
                const TrainConfig& cfg) {
    cfg.validate();
    if (st.pool.num_tasks() != st.bank.num_heads())
        throw std::logic_error("start_task: pool and bank out of step");
    if (st.current_task != st.pool.num_tasks() - 1 ||
        (st.current_task >= 0 && !st.pool.task(st.current_task).frozen))
        throw std::logic_error("start_task: previous task not finished");
    st.pool.add_task(class_ids, st.rng);
    st.bank.add_head(class_ids, st.rng);
    st.current_task = st.pool.num_tasks() - 1;
    if (cfg.flags.enable_pcl && cfg.flags.enable_aux_loss && cfg.flags.enable_aux_head)
        st.bank.reset_aux(static_cast<int>(class_ids.size()), st.rng);
    auto params = st.trainable_params();
    st.opt = SgdMomentum<T>(cfg.momentum);
    st.opt.bind(params);
}

// Mini-batch SGD over the composed objective with a cosine schedule that
// anneals to zero across this task's steps. On completion the task's prompt,
// keys, and head freeze and the auxiliary head is dropped.
template <std::floating_point T>
TaskLog train_task(ExperimentState<T>& st, const TaskData<T>& task_data, const TrainConfig& cfg) {
    cfg.validate();
    const int t = st.current_task;
    if (t < 0 || t != st.pool.num_tasks() - 1 || st.pool.task(t).frozen)
        throw std::logic_error("train_task: call start_task first");
    if (st.pool.task(t).class_labels != task_data.class_ids)
        throw std::invalid_argument("train_task: task data does not match the opened task");

    const auto t0 = std::chrono::steady_clock::now();
    TaskLog log;
    log.task = t;
    log.epochs = cfg.epochs_per_task;

    auto params = st.trainable_params();
    const std::int64_t n = task_data.train.size();
    const int steps_per_epoch = static_cast<int>((n + cfg.batch_size - 1) / cfg.batch_size);
    const int total_steps = cfg.epochs_per_task * steps_per_epoch;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs_per_task; ++epoch) {
        st.rng.shuffle(order);
        double epoch_loss = 0.0;
        int epoch_steps = 0;
        for (std::int64_t start = 0; start < n; start += cfg.batch_size) {
            const auto end = std::min<std::int64_t>(start + cfg.batch_size, n);
            std::vector<std::int64_t> idx(order.begin() + start, order.begin() + end);
            auto [batch, labels] = make_batch(task_data.train, idx);
            auto bd = total_loss(st.backbone, st.pool, st.bank, batch, labels, t, cfg.ccl,
                                 cfg.flags, st.rng);
            check_finite(bd.total, "training loss");
            bd.total.backward();
            st.opt.step(params, cosine_annealing_lr(step, total_steps, cfg.lr0));
            for (auto& p : params) {
                check_finite(p, "parameter after update");
                p.zero_grad();
            }
            StepRecord rec;
            rec.step = step;
            rec.total = bd.total.item();
            rec.ccl = bd.ccl;
            rec.ce = bd.ce;
            rec.aux = bd.aux;
            rec.mk = bd.mk;
            rec.tau_rate = bd.tau_rate;
            log.steps.push_back(rec);
            epoch_loss += rec.total;
            ++epoch_steps;
            ++step;
        }
        const double mean = epoch_loss / epoch_steps;
        if (epoch == 0) log.first_epoch_mean_loss = mean;
        if (epoch == cfg.epochs_per_task - 1) log.last_epoch_mean_loss = mean;
    }

    st.pool.freeze_task(t);
    st.bank.freeze_head(t);
    st.bank.drop_aux();
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return log;
}

template <std::floating_point T>
struct StreamResult {
    AccuracyMatrix matrix;
    std::vector<TaskLog> logs;
};

// Full continual run: train each task in order, evaluating class-incremental
// accuracy on every seen task's test split after each one. Passing the
// matrix of an interrupted run resumes after its last completed task.
template <std::floating_point T>
StreamResult<T> run_stream(ExperimentState<T>& st, const TaskStream<T>& stream,
                           const TrainConfig& cfg, AccuracyMatrix resume = {}) {
    if (static_cast<int>(resume.a.size()) != st.pool.num_tasks())
        throw std::invalid_argument("run_stream: matrix rows must match finished tasks");
    StreamResult<T> out;
    out.matrix = std::move(resume);
    for (int t = st.pool.num_tasks(); t < stream.num_tasks(); ++t) {
        const auto& td = stream.task(t);
        start_task(st, td.class_ids, cfg);
        out.logs.push_back(train_task(st, td, cfg));
        std::vector<double> row;
        for (int j = 0; j <= t; ++j)
            row.push_back(evaluate_accuracy(st.backbone, st.pool, st.bank, stream.task(j).test,
                                            EvalMode::cil));
        out.matrix.add_row(std::move(row), static_cast<int>(td.class_ids.size()));
    }
    out.matrix.require_complete();
    return out;
}

// Checkpoints capture the complete deterministic state: weights, pool, bank,
// optimizer velocities, rng, progress counters, and the partial accuracy
// matrix. Containers are hashed; the code version string must match exactly.
template <std::floating_point T>
void checkpoint_save(const ExperimentState<T>& st, const AccuracyMatrix& m,
                     const std::filesystem::path& path) {
    ByteWriter w;
    w.put_string(kCodeVersion);
    w.put_u8(sizeof(T) == 8 ? 1 : 0);
    st.backbone.serialize_config(w);
    st.backbone.serialize_weights(w);
    st.pool.serialize(w);
    st.bank.serialize(w);
    w.put_f64(st.opt.momentum());
    w.put_u32(static_cast<std::uint32_t>(st.opt.velocities().size()));
    for (const auto& v : st.opt.velocities()) {
        w.put_u64(v.size());
        w.put_span(v.data(), v.size());
    }
    const auto rs = st.rng.state();
    for (auto x : rs) w.put_u64(x);
    w.put_i32(st.current_task);
    w.put_i32(st.total_tasks);
    w.put_u32(static_cast<std::uint32_t>(m.a.size()));
    for (std::size_t t = 0; t < m.a.size(); ++t) {
        w.put_i32(m.task_classes[t]);
        w.put_u32(static_cast<std::uint32_t>(m.a[t].size()));
        for (double v : m.a[t]) w.put_f64(v);
    }
    write_container(path, w.take());
}

template <std::floating_point T>
std::pair<ExperimentState<T>, AccuracyMatrix> checkpoint_load(const std::filesystem::path& path) {
    auto payload = read_container(path);
    ByteReader r(payload);
    const auto version = r.get_string();
    if (version != kCodeVersion)
        throw std::runtime_error("checkpoint_load: made by code version '" + version +
                                 "', this build is '" + std::string(kCodeVersion) + "'");
    const bool is64 = r.get_u8() != 0;
    if (is64 != (sizeof(T) == 8))
        throw std::runtime_error("checkpoint_load: precision mismatch");
    auto cfg = Backbone<T>::deserialize_config(r);
    Rng scratch(0);
    Backbone<T> net(cfg, scratch);
    net.deserialize_weights(r);
    auto pool = PromptPool<T>::deserialize(r);
    auto bank = ClassifierBank<T>::deserialize(r);
    SgdMomentum<T> opt(r.get_f64());
    const auto nv = r.get_u32();
    opt.velocities().resize(nv);
    for (auto& v : opt.velocities()) {
        const auto len = static_cast<std::size_t>(r.get_u64());
        v = r.template get_span<T>(len);
    }
    std::array<std::uint64_t, 4> rs{};
    for (auto& x : rs) x = r.get_u64();
    Rng rng(0);
    rng.set_state(rs);
    const int current_task = r.get_i32();
    const int total_tasks = r.get_i32();
    AccuracyMatrix m;
    const auto rows = r.get_u32();
    for (std::uint32_t t = 0; t < rows; ++t) {
        const int classes = r.get_i32();
        const auto len = r.get_u32();
        std::vector<double> row(len);
        for (auto& v : row) v = r.get_f64();
        m.add_row(std::move(row), classes);
    }
    if (!r.exhausted()) throw std::runtime_error("checkpoint_load: trailing bytes");
    ExperimentState<T> st{std::move(net), std::move(pool),     std::move(bank),
                          std::move(opt), std::move(rng),      current_task,
                          total_tasks};
    return {std::move(st), std::move(m)};
}

}  // namespace cprompt
