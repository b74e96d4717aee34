#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cprompt/rng.hpp"

namespace cprompt {

template <std::floating_point T>
class Tensor;

// One recorded operation: the tensors it read and a closure that routes the
// output gradient into their gradient buffers. The graph is a DAG; parents
// always point toward earlier operations, so ownership cannot cycle.
template <std::floating_point T>
struct OpRecord {
    std::vector<Tensor<T>> parents;
    std::function<void(const Tensor<T>&)> backward;
};

// Shared-storage tensor. Copies alias the same data, gradient, and graph
// node, mirroring the handle semantics the training code wants: modules hold
// parameters, ops capture them, and gradient accumulation is visible to both.
template <std::floating_point T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : Tensor(std::move(shape), T(0)) {}

    Tensor(std::vector<int> shape, T fill) {
        const std::int64_t n = checked_numel(shape);
        store_ = std::make_shared<Storage>();
        store_->shape = std::move(shape);
        store_->data.assign(static_cast<std::size_t>(n), fill);
    }

    Tensor(std::vector<int> shape, std::vector<T> values) {
        const std::int64_t n = checked_numel(shape);
        if (n != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("Tensor: value count does not match shape");
        store_ = std::make_shared<Storage>();
        store_->shape = std::move(shape);
        store_->data = std::move(values);
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev, double mean = 0.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.store_->data) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    bool defined() const { return static_cast<bool>(store_); }

    const std::vector<int>& shape() const { return require().shape; }
    int ndim() const { return static_cast<int>(require().shape.size()); }
    int dim(int i) const { return require().shape.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(require().data.size()); }

    const T* data() const { return require().data.data(); }
    T* data() { return require().data.data(); }
    const std::vector<T>& values() const { return require().data; }
    std::vector<T>& values() { return require().data; }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor is not a scalar");
        return require().data[0];
    }

    bool requires_grad() const { return require().requires_grad; }
    Tensor& set_requires_grad(bool flag) {
        require().requires_grad = flag;
        return *this;
    }

    bool has_grad() const { return !require().grad.empty(); }

    const std::vector<T>& grad() const {
        if (!has_grad()) throw std::runtime_error("Tensor::grad: no gradient accumulated");
        return require().grad;
    }

    // Allocates (zeroed) on first use; backward lambdas accumulate in place.
    T* ensure_grad() {
        auto& s = require();
        if (s.grad.empty()) s.grad.assign(s.data.size(), T(0));
        return s.grad.data();
    }

    void zero_grad() {
        auto& s = require();
        if (!s.grad.empty()) s.grad.assign(s.data.size(), T(0));
    }

    void drop_grad() { require().grad.clear(); }

    const std::shared_ptr<OpRecord<T>>& op() const { return require().op; }
    void set_op(std::shared_ptr<OpRecord<T>> op) { require().op = std::move(op); }

    // Reverse pass from a scalar result. Operations are revisited exactly once
    // in reverse topological order; the order is a pure function of the
    // recorded graph, so repeated backward calls produce identical gradients.
    void backward() {
        if (numel() != 1) throw std::invalid_argument("Tensor::backward: root must be a scalar");
        if (!std::isfinite(static_cast<double>(item())))
            throw std::runtime_error("Tensor::backward: non-finite loss value");
        std::vector<Tensor<T>> order;
        std::unordered_set<const OpRecord<T>*> seen;
        topo_visit(*this, seen, order);
        ensure_grad()[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            const auto& rec = *it->op();
            if (rec.backward) rec.backward(*it);
        }
    }

    // Identity used by unordered containers and aliasing checks.
    const void* storage_id() const { return store_.get(); }

private:
    struct Storage {
        std::vector<int> shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until a gradient is accumulated
        bool requires_grad = false;
        std::shared_ptr<OpRecord<T>> op;
    };

    static std::int64_t checked_numel(const std::vector<int>& shape) {
        if (shape.empty()) throw std::invalid_argument("Tensor: shape must have at least one dim");
        std::int64_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: shape dims must be positive");
            n *= d;
        }
        return n;
    }

    Storage& require() {
        if (!store_) throw std::runtime_error("Tensor: use of undefined tensor");
        return *store_;
    }
    const Storage& require() const {
        if (!store_) throw std::runtime_error("Tensor: use of undefined tensor");
        return *store_;
    }

    static void topo_visit(const Tensor<T>& root, std::unordered_set<const OpRecord<T>*>& seen,
                           std::vector<Tensor<T>>& order) {
        // Iterative post-order DFS; parent order inside each record fixes the
        // traversal, which in turn fixes gradient accumulation order.
        struct Frame {
            Tensor<T> t;
            std::size_t next = 0;
        };
        if (!root.op()) return;
        if (seen.count(root.op().get())) return;
        seen.insert(root.op().get());
        std::vector<Frame> stack;
        stack.push_back({root});
        while (!stack.empty()) {
            Frame& f = stack.back();
            const auto& rec = *f.t.op();
            if (f.next < rec.parents.size()) {
                const Tensor<T>& p = rec.parents[f.next++];
                if (p.defined() && p.op() && !seen.count(p.op().get())) {
                    seen.insert(p.op().get());
                    stack.push_back({p});
                }
            } else {
                order.push_back(f.t);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Storage> store_;
};

// Builds an op output: value plus, when any parent needs gradients, the
// backward record. Constant subgraphs (frozen weights, detached values) never
// allocate graph nodes.
template <std::floating_point T>
Tensor<T> make_op(std::vector<int> shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                  std::function<void(const Tensor<T>&)> backward) {
    Tensor<T> out(std::move(shape), std::move(values));
    bool needs = false;
    for (const auto& p : parents) {
        if (p.defined() && p.requires_grad()) {
            needs = true;
            break;
        }
    }
    if (needs) {
        out.set_requires_grad(true);
        auto rec = std::make_shared<OpRecord<T>>();
        rec->parents = std::move(parents);
        rec->backward = std::move(backward);
        out.set_op(std::move(rec));
    }
    return out;
}

template <std::floating_point T>
void check_finite(const Tensor<T>& t, const std::string& what) {
    for (const T v : t.values()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error("non-finite value in " + what);
    }
}

}  // namespace cprompt
