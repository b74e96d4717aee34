#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "cprompt/kernels.hpp"
#include "cprompt/tensor.hpp"

// Differentiable operations. Each op computes its value eagerly and records a
// backward closure that accumulates into the parents' gradient buffers. All
// loops are deterministic; repeated replay of the same graph yields bit
// identical gradients.

namespace cprompt {

namespace detail {

template <std::floating_point T>
void ensure_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline std::int64_t rows_of(const std::vector<int>& shape) {
    std::int64_t rows = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
    return rows;
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    detail::ensure_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    const T* bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op<T>(
        a.shape(), std::move(out), {a, b}, [a, b](const Tensor<T>& o) mutable {
            const auto& g = o.grad();
            if (a.requires_grad()) {
                T* ga = a.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                T* gb = b.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
}

template <std::floating_point T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    detail::ensure_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    const T* bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_op<T>(
        a.shape(), std::move(out), {a, b}, [a, b](const Tensor<T>& o) mutable {
            const auto& g = o.grad();
            if (a.requires_grad()) {
                T* ga = a.ensure_grad();
                const T* bv = b.data();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
            }
            if (b.requires_grad()) {
                T* gb = b.ensure_grad();
                const T* av = a.data();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
            }
        });
}

template <std::floating_point T>
Tensor<T> scale(Tensor<T> a, T c) {
    std::vector<T> out(a.values());
    for (auto& v : out) v *= c;
    return make_op<T>(a.shape(), std::move(out), {a}, [a, c](const Tensor<T>& o) mutable {
        if (!a.requires_grad()) return;
        const auto& g = o.grad();
        T* ga = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

// x is (..., n); bias is (n), broadcast over leading dims.
template <std::floating_point T>
Tensor<T> add_bias(Tensor<T> x, Tensor<T> bias) {
    if (bias.ndim() != 1 || bias.dim(0) != x.shape().back())
        throw std::invalid_argument("add_bias: bias length must match last dim");
    const int n = bias.dim(0);
    const std::int64_t rows = detail::rows_of(x.shape());
    std::vector<T> out(x.values());
    const T* bv = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * n;
        for (int j = 0; j < n; ++j) row[j] += bv[j];
    }
    return make_op<T>(
        x.shape(), std::move(out), {x, bias}, [x, bias, rows, n](const Tensor<T>& o) mutable {
            const auto& g = o.grad();
            if (x.requires_grad()) {
                T* gx = x.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                T* gb = bias.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* grow = g.data() + r * n;
                    for (int j = 0; j < n; ++j) gb[j] += grow[j];
                }
            }
        });
}

// a is (..., k) with leading dims folded into rows; w is (k, n).
template <std::floating_point T>
Tensor<T> matmul(Tensor<T> a, Tensor<T> w) {
    if (w.ndim() != 2) throw std::invalid_argument("matmul: weight must be rank 2");
    const int k = w.dim(0);
    const int n = w.dim(1);
    if (a.shape().back() != k) throw std::invalid_argument("matmul: inner dims do not match");
    const std::int64_t rows = detail::rows_of(a.shape());
    std::vector<int> out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(static_cast<std::size_t>(rows) * n);
    kernels::matmul_nn(a.data(), w.data(), out.data(), static_cast<int>(rows), k, n, false);
    return make_op<T>(
        std::move(out_shape), std::move(out), {a, w},
        [a, w, rows, k, n](const Tensor<T>& o) mutable {
            const T* g = o.grad().data();
            if (a.requires_grad()) {
                kernels::matmul_nt(g, w.data(), a.ensure_grad(), static_cast<int>(rows), n, k,
                                   true);
            }
            if (w.requires_grad()) {
                kernels::matmul_tn(a.data(), g, w.ensure_grad(), k, static_cast<int>(rows), n,
                                   true);
            }
        });
}

template <std::floating_point T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> bias) {
    return add_bias(matmul(x, w), bias);
}

// Softmax along an arbitrary axis, max-subtracted for stability.
template <std::floating_point T>
Tensor<T> softmax(Tensor<T> x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw std::invalid_argument("softmax: axis out of range");
    const auto& shape = x.shape();
    const int n = shape[static_cast<std::size_t>(axis)];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= shape[static_cast<std::size_t>(i)];
    std::vector<T> out(x.values());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            T* lane = out.data() + o * n * inner + in;
            T maxv = lane[0];
            for (int j = 1; j < n; ++j) maxv = std::max(maxv, lane[static_cast<std::int64_t>(j) * inner]);
            T denom = T(0);
            for (int j = 0; j < n; ++j) {
                T& v = lane[static_cast<std::int64_t>(j) * inner];
                v = std::exp(v - maxv);
                denom += v;
            }
            const T inv = T(1) / denom;
            for (int j = 0; j < n; ++j) lane[static_cast<std::int64_t>(j) * inner] *= inv;
        }
    }
    return make_op<T>(
        x.shape(), std::move(out), {x}, [x, outer, inner, n](const Tensor<T>& o) mutable {
            if (!x.requires_grad()) return;
            const T* y = o.data();
            const T* g = o.grad().data();
            T* gx = x.ensure_grad();
            for (std::int64_t ou = 0; ou < outer; ++ou) {
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = ou * n * inner + in;
                    T dot = T(0);
                    for (int j = 0; j < n; ++j) {
                        const std::int64_t idx = base + static_cast<std::int64_t>(j) * inner;
                        dot += g[idx] * y[idx];
                    }
                    for (int j = 0; j < n; ++j) {
                        const std::int64_t idx = base + static_cast<std::int64_t>(j) * inner;
                        gx[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
}

template <std::floating_point T>
Tensor<T> softmax_rows(Tensor<T> x) {
    return softmax(x, x.ndim() - 1);
}

// Log-softmax over the last axis.
template <std::floating_point T>
Tensor<T> log_softmax_rows(Tensor<T> x) {
    const int n = x.shape().back();
    const std::int64_t rows = detail::rows_of(x.shape());
    std::vector<T> out(x.values());
    for (std::int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * n;
        T maxv = row[0];
        for (int j = 1; j < n; ++j) maxv = std::max(maxv, row[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) sum += std::exp(row[j] - maxv);
        const T lse = maxv + std::log(sum);
        for (int j = 0; j < n; ++j) row[j] -= lse;
    }
    return make_op<T>(
        x.shape(), std::move(out), {x}, [x, rows, n](const Tensor<T>& o) mutable {
            if (!x.requires_grad()) return;
            const T* y = o.data();
            const T* g = o.grad().data();
            T* gx = x.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::int64_t base = r * n;
                T gsum = T(0);
                for (int j = 0; j < n; ++j) gsum += g[base + j];
                for (int j = 0; j < n; ++j)
                    gx[base + j] += g[base + j] - std::exp(y[base + j]) * gsum;
            }
        });
}

// Detached copy: same values, no graph edge, never requires a gradient.
template <std::floating_point T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
    return Tensor<T>(x.shape(), x.values());
}

template <std::floating_point T>
Tensor<T> gelu(Tensor<T> x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    std::vector<T> out(x.values());
    for (auto& v : out) {
        const double xv = static_cast<double>(v);
        v = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * inv_sqrt2)));
    }
    return make_op<T>(x.shape(), std::move(out), {x}, [x](const Tensor<T>& o) mutable {
        if (!x.requires_grad()) return;
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        const auto& g = o.grad();
        const T* xv = x.data();
        T* gx = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = static_cast<double>(xv[i]);
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * static_cast<T>(cdf + v * pdf);
        }
    });
}

// Row-wise layer norm over the last axis with affine parameters.
template <std::floating_point T>
Tensor<T> layer_norm_rows(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                          T eps = T(1e-5)) {
    const int n = x.shape().back();
    if (gamma.ndim() != 1 || gamma.dim(0) != n || beta.ndim() != 1 || beta.dim(0) != n)
        throw std::invalid_argument("layer_norm_rows: affine params must match last dim");
    const std::int64_t rows = detail::rows_of(x.shape());
    std::vector<T> out(x.values());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    auto xhat = std::make_shared<std::vector<T>>(x.values().size());
    const T* gv = gamma.data();
    const T* bv = beta.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        T* row = out.data() + r * n;
        T mean = T(0);
        for (int j = 0; j < n; ++j) mean += row[j];
        mean /= T(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= T(n);
        const T istd = T(1) / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(r)] = istd;
        T* xh = xhat->data() + r * n;
        for (int j = 0; j < n; ++j) {
            xh[j] = (row[j] - mean) * istd;
            row[j] = gv[j] * xh[j] + bv[j];
        }
    }
    return make_op<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, rows, n, inv_std, xhat](const Tensor<T>& o) mutable {
            const T* g = o.grad().data();
            const T* xh = xhat->data();
            if (gamma.requires_grad()) {
                T* gg = gamma.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j) gg[j] += g[r * n + j] * xh[r * n + j];
            }
            if (beta.requires_grad()) {
                T* gb = beta.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
            if (x.requires_grad()) {
                const T* gv = gamma.data();
                T* gx = x.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const std::int64_t base = r * n;
                    T sum_d = T(0), sum_dx = T(0);
                    for (int j = 0; j < n; ++j) {
                        const T d = g[base + j] * gv[j];
                        sum_d += d;
                        sum_dx += d * xh[base + j];
                    }
                    const T istd = (*inv_std)[static_cast<std::size_t>(r)];
                    for (int j = 0; j < n; ++j) {
                        const T d = g[base + j] * gv[j];
                        gx[base + j] +=
                            istd * (d - sum_d / T(n) - xh[base + j] * sum_dx / T(n));
                    }
                }
            }
        });
}

template <std::floating_point T>
Tensor<T> sum_all(Tensor<T> x) {
    T acc = T(0);
    for (const T v : x.values()) acc += v;
    return make_op<T>({1}, {acc}, {x}, [x](const Tensor<T>& o) mutable {
        if (!x.requires_grad()) return;
        const T g = o.grad()[0];
        T* gx = x.ensure_grad();
        for (std::int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
}

template <std::floating_point T>
Tensor<T> mean_all(Tensor<T> x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <std::floating_point T>
Tensor<T> reshape(Tensor<T> x, std::vector<int> shape) {
    Tensor<T> probe(shape);  // validates the shape
    if (probe.numel() != x.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    return make_op<T>(std::move(shape), x.values(), {x}, [x](const Tensor<T>& o) mutable {
        if (!x.requires_grad()) return;
        const auto& g = o.grad();
        T* gx = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

// Prepends the rows of m (p, d) to every batch element of x (b, t, d). The
// prepended rows are shared across the batch, so their gradient is the sum
// over batch elements.
template <std::floating_point T>
Tensor<T> concat_tokens(Tensor<T> m, Tensor<T> x) {
    if (m.ndim() != 2 || x.ndim() != 3 || m.dim(1) != x.dim(2))
        throw std::invalid_argument("concat_tokens: expected (p,d) and (b,t,d) with equal d");
    const int p = m.dim(0);
    const int b = x.dim(0);
    const int t = x.dim(1);
    const int d = x.dim(2);
    std::vector<T> out(static_cast<std::size_t>(b) * (p + t) * d);
    const T* mv = m.data();
    const T* xv = x.data();
    for (int bi = 0; bi < b; ++bi) {
        T* dst = out.data() + static_cast<std::int64_t>(bi) * (p + t) * d;
        std::copy(mv, mv + static_cast<std::int64_t>(p) * d, dst);
        std::copy(xv + static_cast<std::int64_t>(bi) * t * d,
                  xv + static_cast<std::int64_t>(bi + 1) * t * d, dst + static_cast<std::int64_t>(p) * d);
    }
    return make_op<T>(
        {b, p + t, d}, std::move(out), {m, x}, [m, x, p, b, t, d](const Tensor<T>& o) mutable {
            const T* g = o.grad().data();
            if (m.requires_grad()) {
                T* gm = m.ensure_grad();
                for (int bi = 0; bi < b; ++bi) {
                    const T* src = g + static_cast<std::int64_t>(bi) * (p + t) * d;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(p) * d; ++i)
                        gm[i] += src[i];
                }
            }
            if (x.requires_grad()) {
                T* gx = x.ensure_grad();
                for (int bi = 0; bi < b; ++bi) {
                    const T* src = g + static_cast<std::int64_t>(bi) * (p + t) * d +
                                   static_cast<std::int64_t>(p) * d;
                    T* dst = gx + static_cast<std::int64_t>(bi) * t * d;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(t) * d; ++i)
                        dst[i] += src[i];
                }
            }
        });
}

// Keeps token rows [from, to) of x (b, t, d).
template <std::floating_point T>
Tensor<T> slice_tokens(Tensor<T> x, int from, int to) {
    if (x.ndim() != 3) throw std::invalid_argument("slice_tokens: expected rank 3");
    const int b = x.dim(0);
    const int t = x.dim(1);
    const int d = x.dim(2);
    if (from < 0 || to > t || from >= to)
        throw std::out_of_range("slice_tokens: invalid token range");
    const int keep = to - from;
    std::vector<T> out(static_cast<std::size_t>(b) * keep * d);
    const T* xv = x.data();
    for (int bi = 0; bi < b; ++bi) {
        const T* src = xv + (static_cast<std::int64_t>(bi) * t + from) * d;
        std::copy(src, src + static_cast<std::int64_t>(keep) * d,
                  out.data() + static_cast<std::int64_t>(bi) * keep * d);
    }
    return make_op<T>(
        {b, keep, d}, std::move(out), {x}, [x, from, b, t, d, keep](const Tensor<T>& o) mutable {
            if (!x.requires_grad()) return;
            const T* g = o.grad().data();
            T* gx = x.ensure_grad();
            for (int bi = 0; bi < b; ++bi) {
                const T* src = g + static_cast<std::int64_t>(bi) * keep * d;
                T* dst = gx + (static_cast<std::int64_t>(bi) * t + from) * d;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(keep) * d; ++i)
                    dst[i] += src[i];
            }
        });
}

// Keeps rows [from, to) of a rank-2 tensor.
template <std::floating_point T>
Tensor<T> slice_rows(Tensor<T> x, int from, int to) {
    if (x.ndim() != 2) throw std::invalid_argument("slice_rows: expected rank 2");
    const int r = x.dim(0);
    const int c = x.dim(1);
    if (from < 0 || to > r || from >= to) throw std::out_of_range("slice_rows: invalid range");
    const int keep = to - from;
    std::vector<T> out(x.data() + static_cast<std::int64_t>(from) * c,
                       x.data() + static_cast<std::int64_t>(to) * c);
    return make_op<T>({keep, c}, std::move(out), {x}, [x, from, c, keep](const Tensor<T>& o) mutable {
        if (!x.requires_grad()) return;
        const T* g = o.grad().data();
        T* gx = x.ensure_grad() + static_cast<std::int64_t>(from) * c;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(keep) * c; ++i) gx[i] += g[i];
    });
}

// x (b, t, d) plus m (t, d) broadcast over the batch.
template <std::floating_point T>
Tensor<T> add_broadcast_rows(Tensor<T> x, Tensor<T> m) {
    if (x.ndim() != 3 || m.ndim() != 2 || x.dim(1) != m.dim(0) || x.dim(2) != m.dim(1))
        throw std::invalid_argument("add_broadcast_rows: expected (b,t,d) and (t,d)");
    const int b = x.dim(0);
    const std::int64_t td = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
    std::vector<T> out(x.values());
    const T* mv = m.data();
    for (int bi = 0; bi < b; ++bi) {
        T* dst = out.data() + bi * td;
        for (std::int64_t i = 0; i < td; ++i) dst[i] += mv[i];
    }
    return make_op<T>(
        x.shape(), std::move(out), {x, m}, [x, m, b, td](const Tensor<T>& o) mutable {
            const T* g = o.grad().data();
            if (x.requires_grad()) {
                T* gx = x.ensure_grad();
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(b) * td; ++i) gx[i] += g[i];
            }
            if (m.requires_grad()) {
                T* gm = m.ensure_grad();
                for (int bi = 0; bi < b; ++bi) {
                    const T* src = g + bi * td;
                    for (std::int64_t i = 0; i < td; ++i) gm[i] += src[i];
                }
            }
        });
}

// Multi-head self-attention over packed projections. qkv is (b, s, 3d) with
// [q | k | v] per token; returns the concatenated head outputs (b, s, d).
template <std::floating_point T>
Tensor<T> attention_qkv(Tensor<T> qkv, int num_heads) {
    if (qkv.ndim() != 3) throw std::invalid_argument("attention_qkv: expected rank 3");
    const int b = qkv.dim(0);
    const int s = qkv.dim(1);
    if (qkv.dim(2) % 3 != 0) throw std::invalid_argument("attention_qkv: last dim must be 3*d");
    const int d = qkv.dim(2) / 3;
    if (num_heads <= 0 || d % num_heads != 0)
        throw std::invalid_argument("attention_qkv: head count must divide d");
    std::vector<T> out(static_cast<std::size_t>(b) * s * d);
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(b) * num_heads * s * s);
    kernels::attention_forward(qkv.data(), out.data(), probs->data(), b, s, d, num_heads);
    return make_op<T>(
        {b, s, d}, std::move(out), {qkv}, [qkv, probs, b, s, d, num_heads](const Tensor<T>& o) mutable {
            if (!qkv.requires_grad()) return;
            kernels::attention_backward(qkv.data(), probs->data(), o.grad().data(),
                                        qkv.ensure_grad(), b, s, d, num_heads);
        });
}

// Mean cross-entropy of row logits against integer labels; log-sum-exp keeps
// the loss finite for any finite logits, so the value is always >= 0.
template <std::floating_point T>
Tensor<T> cross_entropy(Tensor<T> logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: expected rank 2 logits");
    const int rows = logits.dim(0);
    const int n = logits.dim(1);
    if (static_cast<int>(labels.size()) != rows)
        throw std::invalid_argument("cross_entropy: label count must match rows");
    for (int y : labels)
        if (y < 0 || y >= n) throw std::out_of_range("cross_entropy: label out of range");
    const T* lv = logits.data();
    T total = T(0);
    for (int r = 0; r < rows; ++r) {
        const T* row = lv + static_cast<std::int64_t>(r) * n;
        T maxv = row[0];
        for (int j = 1; j < n; ++j) maxv = std::max(maxv, row[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) sum += std::exp(row[j] - maxv);
        total += maxv + std::log(sum) - row[labels[static_cast<std::size_t>(r)]];
    }
    total /= T(rows);
    return make_op<T>({1}, {total}, {logits}, [logits, labels, rows, n](const Tensor<T>& o) mutable {
        if (!logits.requires_grad()) return;
        const T g = o.grad()[0] / T(rows);
        const T* lv = logits.data();
        T* gl = logits.ensure_grad();
        for (int r = 0; r < rows; ++r) {
            const T* row = lv + static_cast<std::int64_t>(r) * n;
            T* grow = gl + static_cast<std::int64_t>(r) * n;
            T maxv = row[0];
            for (int j = 1; j < n; ++j) maxv = std::max(maxv, row[j]);
            T sum = T(0);
            for (int j = 0; j < n; ++j) sum += std::exp(row[j] - maxv);
            const T inv = T(1) / sum;
            for (int j = 0; j < n; ++j) grow[j] += g * std::exp(row[j] - maxv) * inv;
            grow[labels[static_cast<std::size_t>(r)]] -= g;
        }
    });
}

template <std::floating_point T>
Tensor<T> cross_entropy(Tensor<T> logits, int label) {
    if (logits.ndim() != 1) throw std::invalid_argument("cross_entropy: expected rank 1 logits");
    return cross_entropy(reshape(logits, {1, logits.dim(0)}), std::vector<int>{label});
}

inline constexpr double kCosineNormFloor = 1e-12;

// Cosine similarity of two vectors; rejects (near-)zero norms instead of
// silently dividing by epsilon.
template <std::floating_point T>
Tensor<T> cosine_similarity(Tensor<T> a, Tensor<T> b) {
    if (a.ndim() != 1 || b.ndim() != 1 || a.dim(0) != b.dim(0))
        throw std::invalid_argument("cosine_similarity: expected equal-length vectors");
    const int n = a.dim(0);
    const T* av = a.data();
    const T* bv = b.data();
    T dot = T(0), na2 = T(0), nb2 = T(0);
    for (int i = 0; i < n; ++i) {
        dot += av[i] * bv[i];
        na2 += av[i] * av[i];
        nb2 += bv[i] * bv[i];
    }
    const T na = std::sqrt(na2);
    const T nb = std::sqrt(nb2);
    if (static_cast<double>(na) < kCosineNormFloor || static_cast<double>(nb) < kCosineNormFloor)
        throw std::invalid_argument("cosine_similarity: zero-norm input");
    const T sim = dot / (na * nb);
    return make_op<T>({1}, {sim}, {a, b}, [a, b, n, na, nb, sim](const Tensor<T>& o) mutable {
        const T g = o.grad()[0];
        const T* av = a.data();
        const T* bv = b.data();
        if (a.requires_grad()) {
            T* ga = a.ensure_grad();
            for (int i = 0; i < n; ++i)
                ga[i] += g * (bv[i] / (na * nb) - sim * av[i] / (na * na));
        }
        if (b.requires_grad()) {
            T* gb = b.ensure_grad();
            for (int i = 0; i < n; ++i)
                gb[i] += g * (av[i] / (na * nb) - sim * bv[i] / (nb * nb));
        }
    });
}

// Row-wise cosine similarities between queries q (b, d) and keys k (m, d),
// giving (b, m). Gradients flow to both sides when requested.
template <std::floating_point T>
Tensor<T> cosine_qk(Tensor<T> q, Tensor<T> k) {
    if (q.ndim() != 2 || k.ndim() != 2 || q.dim(1) != k.dim(1))
        throw std::invalid_argument("cosine_qk: expected (b,d) and (m,d)");
    const int b = q.dim(0);
    const int m = k.dim(0);
    const int d = q.dim(1);
    auto qn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(b));
    auto kn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(m));
    const T* qv = q.data();
    const T* kv = k.data();
    for (int i = 0; i < b; ++i) {
        T acc = T(0);
        for (int c = 0; c < d; ++c) acc += qv[i * d + c] * qv[i * d + c];
        (*qn)[static_cast<std::size_t>(i)] = std::sqrt(acc);
        if (static_cast<double>((*qn)[static_cast<std::size_t>(i)]) < kCosineNormFloor)
            throw std::invalid_argument("cosine_qk: zero-norm query");
    }
    for (int j = 0; j < m; ++j) {
        T acc = T(0);
        for (int c = 0; c < d; ++c) acc += kv[j * d + c] * kv[j * d + c];
        (*kn)[static_cast<std::size_t>(j)] = std::sqrt(acc);
        if (static_cast<double>((*kn)[static_cast<std::size_t>(j)]) < kCosineNormFloor)
            throw std::invalid_argument("cosine_qk: zero-norm key");
    }
    std::vector<T> out(static_cast<std::size_t>(b) * m);
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < m; ++j) {
            T dot = T(0);
            for (int c = 0; c < d; ++c) dot += qv[i * d + c] * kv[j * d + c];
            out[static_cast<std::size_t>(i) * m + j] =
                dot / ((*qn)[static_cast<std::size_t>(i)] * (*kn)[static_cast<std::size_t>(j)]);
        }
    }
    return make_op<T>(
        {b, m}, std::move(out), {q, k}, [q, k, qn, kn, b, m, d](const Tensor<T>& o) mutable {
            const T* g = o.grad().data();
            const T* y = o.data();
            const T* qv = q.data();
            const T* kv = k.data();
            if (q.requires_grad()) {
                T* gq = q.ensure_grad();
                for (int i = 0; i < b; ++i) {
                    const T nq = (*qn)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < m; ++j) {
                        const T gij = g[static_cast<std::int64_t>(i) * m + j];
                        if (gij == T(0)) continue;
                        const T nk = (*kn)[static_cast<std::size_t>(j)];
                        const T sim = y[static_cast<std::int64_t>(i) * m + j];
                        for (int c = 0; c < d; ++c)
                            gq[i * d + c] +=
                                gij * (kv[j * d + c] / (nq * nk) - sim * qv[i * d + c] / (nq * nq));
                    }
                }
            }
            if (k.requires_grad()) {
                T* gk = k.ensure_grad();
                for (int i = 0; i < b; ++i) {
                    const T nq = (*qn)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < m; ++j) {
                        const T gij = g[static_cast<std::int64_t>(i) * m + j];
                        if (gij == T(0)) continue;
                        const T nk = (*kn)[static_cast<std::size_t>(j)];
                        const T sim = y[static_cast<std::int64_t>(i) * m + j];
                        for (int c = 0; c < d; ++c)
                            gk[j * d + c] +=
                                gij * (qv[i * d + c] / (nq * nk) - sim * kv[j * d + c] / (nk * nk));
                    }
                }
            }
        });
}

// Concatenates (b, n_i) blocks along the column axis.
template <std::floating_point T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const int b = parts.front().dim(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != b)
            throw std::invalid_argument("concat_cols: row counts must match");
        total += p.dim(1);
    }
    std::vector<T> out(static_cast<std::size_t>(b) * total);
    int off = 0;
    for (const auto& p : parts) {
        const int n = p.dim(1);
        const T* pv = p.data();
        for (int r = 0; r < b; ++r)
            std::copy(pv + static_cast<std::int64_t>(r) * n, pv + static_cast<std::int64_t>(r + 1) * n,
                      out.data() + static_cast<std::int64_t>(r) * total + off);
        off += n;
    }
    std::vector<Tensor<T>> parents = parts;
    return make_op<T>(
        {b, total}, std::move(out), std::move(parents),
        [parts, b, total](const Tensor<T>& o) mutable {
            const T* g = o.grad().data();
            int off = 0;
            for (auto part : parts) {
                const int n = part.dim(1);
                if (part.requires_grad()) {
                    T* gp = part.ensure_grad();
                    for (int r = 0; r < b; ++r) {
                        const T* src = g + static_cast<std::int64_t>(r) * total + off;
                        T* dst = gp + static_cast<std::int64_t>(r) * n;
                        for (int j = 0; j < n; ++j) dst[j] += src[j];
                    }
                }
                off += n;
            }
        });
}

// Plain value-space affine map (no graph); used where logits are needed for
// comparisons that must stay outside the gradient tape.
template <std::floating_point T>
void linear_values(const T* x, std::int64_t rows, const Tensor<T>& w, const Tensor<T>& bias,
                   T* out) {
    const int k = w.dim(0);
    const int n = w.dim(1);
    kernels::matmul_nn(x, w.data(), out, static_cast<int>(rows), k, n, false);
    const T* bv = bias.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) out[r * n + j] += bv[j];
}

}  // namespace cprompt
