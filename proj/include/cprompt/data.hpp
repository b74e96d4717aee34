#pragma once

#include <concepts>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cprompt/rng.hpp"
#include "cprompt/tensor.hpp"

namespace cprompt {

// Synthetic image family: every class is a fixed random prototype plus
// i.i.d. Gaussian pixel noise; every continual task additionally carries a
// task-wide style pattern scaled by style_shift. Pretraining classes use
// separate prototypes and no style, and their label range [0, P) is disjoint
// from the stream range [P, P + S).
struct SyntheticSpec {
    int num_pretrain_classes = 20;
    int tasks = 5;
    int classes_per_task = 4;
    int train_per_class = 200;
    int test_per_class = 50;
    int pretrain_train_per_class = 200;
    int pretrain_test_per_class = 50;
    int image_size = 16;
    int channels = 3;
    double noise_sigma = 0.3;
    double style_shift = 0.5;

    int image_dim() const { return channels * image_size * image_size; }
    int num_stream_classes() const { return tasks * classes_per_task; }

    void validate() const {
        if (num_pretrain_classes <= 0) throw std::invalid_argument("SyntheticSpec: need pretrain classes");
        if (tasks <= 0 || classes_per_task <= 0)
            throw std::invalid_argument("SyntheticSpec: need at least one task and class");
        if (train_per_class <= 0 || test_per_class <= 0 || pretrain_train_per_class <= 0 ||
            pretrain_test_per_class <= 0)
            throw std::invalid_argument("SyntheticSpec: per-class counts must be positive");
        if (image_size <= 0 || channels <= 0)
            throw std::invalid_argument("SyntheticSpec: bad image dims");
        if (noise_sigma < 0.0 || style_shift < 0.0)
            throw std::invalid_argument("SyntheticSpec: noise and style must be non-negative");
    }
};

template <std::floating_point T>
struct Dataset {
    int image_dim = 0;
    std::vector<T> pixels;       // size() == labels.size() * image_dim
    std::vector<int> labels;     // global class ids

    std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }

    const T* image(std::int64_t i) const { return pixels.data() + i * image_dim; }
};

template <std::floating_point T>
struct TaskData {
    Dataset<T> train;
    Dataset<T> test;
    std::vector<int> class_ids;  // global ids, contiguous ascending
    int label_base = 0;          // class_ids.front()

    int local_label(int global) const {
        const int local = global - label_base;
        if (local < 0 || local >= static_cast<int>(class_ids.size()))
            throw std::out_of_range("TaskData: label outside task");
        return local;
    }
};

// Rehearsal-free by construction: training code receives one task's split at
// a time through task(t), never the whole stream.
template <std::floating_point T>
struct TaskStream {
    SyntheticSpec spec;
    Dataset<T> pretrain_train;
    Dataset<T> pretrain_test;
    std::vector<TaskData<T>> tasks_data;

    int num_tasks() const { return static_cast<int>(tasks_data.size()); }
    const TaskData<T>& task(int t) const {
        if (t < 0 || t >= num_tasks()) throw std::out_of_range("TaskStream: task index");
        return tasks_data[static_cast<std::size_t>(t)];
    }
};

namespace detail {

template <std::floating_point T>
void append_example(Dataset<T>& ds, const std::vector<double>& proto,
                    const std::vector<double>& style, double noise_sigma, int label, Rng& rng) {
    for (std::size_t i = 0; i < proto.size(); ++i) {
        const double v = proto[i] + style[i] + noise_sigma * rng.normal();
        ds.pixels.push_back(static_cast<T>(v));
    }
    ds.labels.push_back(label);
}

}  // namespace detail

// Draws prototypes, task styles, then examples, in one fixed order from the
// caller's rng; identical spec and rng state reproduce the stream bit for bit.
template <std::floating_point T>
TaskStream<T> generate_synthetic(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    const int dim = spec.image_dim();
    const int P = spec.num_pretrain_classes;
    const int S = spec.num_stream_classes();

    auto draw_pattern = [&](double scl) {
        std::vector<double> v(static_cast<std::size_t>(dim));
        for (auto& x : v) x = scl * rng.normal();
        return v;
    };

    // Prototype amplitude comparable to the noise floor keeps class clusters
    // overlapping in feature space, so prompt selection stays imperfect and
    // consistency training has headroom to matter.
    constexpr double kPrototypeScale = 0.55;

    std::vector<std::vector<double>> pre_protos, stream_protos, styles;
    for (int c = 0; c < P; ++c) pre_protos.push_back(draw_pattern(kPrototypeScale));
    for (int c = 0; c < S; ++c) stream_protos.push_back(draw_pattern(kPrototypeScale));
    for (int t = 0; t < spec.tasks; ++t) styles.push_back(draw_pattern(spec.style_shift));
    const std::vector<double> no_style(static_cast<std::size_t>(dim), 0.0);

    TaskStream<T> stream;
    stream.spec = spec;
    stream.pretrain_train.image_dim = dim;
    stream.pretrain_test.image_dim = dim;

    for (int c = 0; c < P; ++c)
        for (int i = 0; i < spec.pretrain_train_per_class; ++i)
            detail::append_example(stream.pretrain_train, pre_protos[static_cast<std::size_t>(c)],
                                   no_style, spec.noise_sigma, c, rng);
    for (int c = 0; c < P; ++c)
        for (int i = 0; i < spec.pretrain_test_per_class; ++i)
            detail::append_example(stream.pretrain_test, pre_protos[static_cast<std::size_t>(c)],
                                   no_style, spec.noise_sigma, c, rng);

    for (int t = 0; t < spec.tasks; ++t) {
        TaskData<T> td;
        td.train.image_dim = dim;
        td.test.image_dim = dim;
        td.label_base = P + t * spec.classes_per_task;
        for (int k = 0; k < spec.classes_per_task; ++k) td.class_ids.push_back(td.label_base + k);
        for (int k = 0; k < spec.classes_per_task; ++k) {
            const auto& proto = stream_protos[static_cast<std::size_t>(t * spec.classes_per_task + k)];
            for (int i = 0; i < spec.train_per_class; ++i)
                detail::append_example(td.train, proto, styles[static_cast<std::size_t>(t)],
                                       spec.noise_sigma, td.label_base + k, rng);
        }
        for (int k = 0; k < spec.classes_per_task; ++k) {
            const auto& proto = stream_protos[static_cast<std::size_t>(t * spec.classes_per_task + k)];
            for (int i = 0; i < spec.test_per_class; ++i)
                detail::append_example(td.test, proto, styles[static_cast<std::size_t>(t)],
                                       spec.noise_sigma, td.label_base + k, rng);
        }
        stream.tasks_data.push_back(std::move(td));
    }
    return stream;
}

// Packs selected examples into a (batch, image_dim) tensor plus labels.
template <std::floating_point T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const Dataset<T>& ds,
                                                  const std::vector<std::int64_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("make_batch: empty index list");
    Tensor<T> batch({static_cast<int>(idx.size()), ds.image_dim});
    std::vector<int> labels;
    labels.reserve(idx.size());
    T* out = batch.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const std::int64_t i = idx[r];
        if (i < 0 || i >= ds.size()) throw std::out_of_range("make_batch: index out of range");
        const T* src = ds.image(i);
        std::copy(src, src + ds.image_dim, out + static_cast<std::int64_t>(r) * ds.image_dim);
        labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    }
    return {std::move(batch), std::move(labels)};
}

}  // namespace cprompt
