#pragma once

#include <cmath>
#include <concepts>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "cprompt/tensor.hpp"

namespace cprompt {

// Cosine annealing from lr0 down to zero over total_steps, evaluated at an
// integer step. Schedules restart from step 0 at each task boundary.
inline double cosine_annealing_lr(int step, int total_steps, double lr0) {
    if (total_steps <= 0) throw std::invalid_argument("cosine_annealing_lr: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw std::out_of_range("cosine_annealing_lr: step outside [0, total_steps]");
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                       static_cast<double>(total_steps)));
}

// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v. Velocities are bound
// to an explicit parameter list so the state can be serialized and restored.
template <std::floating_point T>
class SgdMomentum {
public:
    SgdMomentum() = default;
    explicit SgdMomentum(double momentum) : momentum_(momentum) {
        if (momentum < 0.0 || momentum >= 1.0)
            throw std::invalid_argument("SgdMomentum: momentum must be in [0, 1)");
    }

    double momentum() const { return momentum_; }

    // Starts fresh velocity buffers for a new trainable set.
    void bind(const std::vector<Tensor<T>>& params) {
        velocity_.clear();
        velocity_.reserve(params.size());
        for (const auto& p : params)
            velocity_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }

    std::size_t bound_count() const { return velocity_.size(); }

    void step(std::vector<Tensor<T>>& params, double lr) {
        if (params.size() != velocity_.size())
            throw std::invalid_argument("SgdMomentum::step: parameter list does not match bound state");
        const T mu = static_cast<T>(momentum_);
        const T eta = static_cast<T>(lr);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            auto& v = velocity_[i];
            if (static_cast<std::int64_t>(v.size()) != p.numel())
                throw std::invalid_argument("SgdMomentum::step: parameter shape changed");
            const T* g = p.has_grad() ? p.grad().data() : nullptr;
            T* pv = p.data();
            for (std::size_t j = 0; j < v.size(); ++j) {
                const T gj = g ? g[j] : T(0);
                v[j] = mu * v[j] + gj;
                pv[j] -= eta * v[j];
            }
        }
    }

    const std::vector<std::vector<T>>& velocities() const { return velocity_; }
    std::vector<std::vector<T>>& velocities() { return velocity_; }

private:
    double momentum_ = 0.9;
    std::vector<std::vector<T>> velocity_;
};

}  // namespace cprompt
