#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

// Dense kernels behind the autodiff ops. Every kernel has a serial reference
// and an OpenMP variant; the parallel loops split disjoint output rows and
// keep each row's reduction order fixed, so both variants produce bit
// identical results and either can back the test suite.

namespace cprompt::kernels {

inline bool openmp_enabled() {
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

inline int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// Work threshold (in multiply-adds) below which the dispatchers stay serial.
inline constexpr std::int64_t kParallelCutoff = 1 << 15;

// ---------------------------------------------------------------- matmul ---
// C (M x N) = A (M x K) * B (K x N); accumulate adds into C instead.

template <std::floating_point T>
void matmul_nn_serial(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::int64_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) crow[j] = T(0);
        }
        const T* arow = a + static_cast<std::int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <std::floating_point T>
void matmul_nn_omp(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        matmul_nn_serial(a + static_cast<std::int64_t>(i) * k, b,
                         c + static_cast<std::int64_t>(i) * n, 1, k, n, accumulate);
    }
}

// C (M x N) = A (M x K) * B^T, with B stored (N x K).
template <std::floating_point T>
void matmul_nt_serial(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::int64_t>(i) * k;
        T* crow = c + static_cast<std::int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<std::int64_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

template <std::floating_point T>
void matmul_nt_omp(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        matmul_nt_serial(a + static_cast<std::int64_t>(i) * k, b,
                         c + static_cast<std::int64_t>(i) * n, 1, k, n, accumulate);
    }
}

// C (M x N) = A^T * B, with A stored (K x M) and B stored (K x N).
template <std::floating_point T>
void matmul_tn_serial(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::int64_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) crow[j] = T(0);
        }
        for (int p = 0; p < k; ++p) {
            const T av = a[static_cast<std::int64_t>(p) * m + i];
            const T* brow = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <std::floating_point T>
void matmul_tn_omp(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        // Row slice of C corresponds to column i of A; reuse the serial body
        // with m == 1 by offsetting A is not possible here, so inline it.
        T* crow = c + static_cast<std::int64_t>(i) * n;
        if (!accumulate) {
            for (int j = 0; j < n; ++j) crow[j] = T(0);
        }
        for (int p = 0; p < k; ++p) {
            const T av = a[static_cast<std::int64_t>(p) * m + i];
            const T* brow = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <std::floating_point T>
void matmul_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
    if (openmp_enabled() && work >= kParallelCutoff && m > 1) {
        matmul_nn_omp(a, b, c, m, k, n, accumulate);
    } else {
        matmul_nn_serial(a, b, c, m, k, n, accumulate);
    }
}

template <std::floating_point T>
void matmul_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
    if (openmp_enabled() && work >= kParallelCutoff && m > 1) {
        matmul_nt_omp(a, b, c, m, k, n, accumulate);
    } else {
        matmul_nt_serial(a, b, c, m, k, n, accumulate);
    }
}

template <std::floating_point T>
void matmul_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    const std::int64_t work = static_cast<std::int64_t>(m) * k * n;
    if (openmp_enabled() && work >= kParallelCutoff && m > 1) {
        matmul_tn_omp(a, b, c, m, k, n, accumulate);
    } else {
        matmul_tn_serial(a, b, c, m, k, n, accumulate);
    }
}

// ------------------------------------------------------------- attention ---
// qkv is (B, S, 3D) laid out row-major with [q | k | v] per token; out is
// (B, S, D); probs stores the softmaxed scores (B, H, S, S) for backward.

template <std::floating_point T>
void attention_head_forward(const T* qkv, T* out, T* probs, int s, int d, int dh, int head) {
    const int qoff = head * dh;
    const int koff = d + head * dh;
    const int voff = 2 * d + head * dh;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    for (int i = 0; i < s; ++i) {
        const T* qi = qkv + static_cast<std::int64_t>(i) * 3 * d + qoff;
        T* prow = probs + static_cast<std::int64_t>(i) * s;
        T maxv = T(0);
        for (int j = 0; j < s; ++j) {
            const T* kj = qkv + static_cast<std::int64_t>(j) * 3 * d + koff;
            T acc = T(0);
            for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
            prow[j] = acc * inv_sqrt;
            if (j == 0 || prow[j] > maxv) maxv = prow[j];
        }
        T denom = T(0);
        for (int j = 0; j < s; ++j) {
            prow[j] = std::exp(prow[j] - maxv);
            denom += prow[j];
        }
        const T inv_denom = T(1) / denom;
        for (int j = 0; j < s; ++j) prow[j] *= inv_denom;
        T* orow = out + static_cast<std::int64_t>(i) * d + qoff;
        for (int c = 0; c < dh; ++c) orow[c] = T(0);
        for (int j = 0; j < s; ++j) {
            const T p = prow[j];
            const T* vj = qkv + static_cast<std::int64_t>(j) * 3 * d + voff;
            for (int c = 0; c < dh; ++c) orow[c] += p * vj[c];
        }
    }
}

template <std::floating_point T>
void attention_forward_serial(const T* qkv, T* out, T* probs, int b, int s, int d, int h) {
    const int dh = d / h;
    for (int idx = 0; idx < b * h; ++idx) {
        const int bi = idx / h;
        const int hi = idx % h;
        attention_head_forward(qkv + static_cast<std::int64_t>(bi) * s * 3 * d,
                               out + static_cast<std::int64_t>(bi) * s * d,
                               probs + static_cast<std::int64_t>(idx) * s * s, s, d, dh, hi);
    }
}

template <std::floating_point T>
void attention_forward_omp(const T* qkv, T* out, T* probs, int b, int s, int d, int h) {
    const int dh = d / h;
#pragma omp parallel for schedule(static)
    for (int idx = 0; idx < b * h; ++idx) {
        const int bi = idx / h;
        const int hi = idx % h;
        attention_head_forward(qkv + static_cast<std::int64_t>(bi) * s * 3 * d,
                               out + static_cast<std::int64_t>(bi) * s * d,
                               probs + static_cast<std::int64_t>(idx) * s * s, s, d, dh, hi);
    }
}

// Accumulates gradients into dqkv; each (batch, head) pair touches a disjoint
// column block, so the parallel split is race free.
template <std::floating_point T>
void attention_head_backward(const T* qkv, const T* probs, const T* dout, T* dqkv, int s, int d,
                             int dh, int head) {
    const int qoff = head * dh;
    const int koff = d + head * dh;
    const int voff = 2 * d + head * dh;
    const T inv_sqrt = T(1) / std::sqrt(T(dh));
    for (int i = 0; i < s; ++i) {
        const T* prow = probs + static_cast<std::int64_t>(i) * s;
        const T* drow = dout + static_cast<std::int64_t>(i) * d + qoff;
        // dV and the raw dP in one sweep.
        T dp_dot = T(0);  // sum_j dP_ij * P_ij, needed by the softmax backward
        for (int j = 0; j < s; ++j) {
            const T* vj = qkv + static_cast<std::int64_t>(j) * 3 * d + voff;
            T* dvj = dqkv + static_cast<std::int64_t>(j) * 3 * d + voff;
            T dp = T(0);
            for (int c = 0; c < dh; ++c) {
                dvj[c] += prow[j] * drow[c];
                dp += drow[c] * vj[c];
            }
            dp_dot += dp * prow[j];
        }
        // dp is recomputed in the next sweep instead of buffered per row.
        const T* qi = qkv + static_cast<std::int64_t>(i) * 3 * d + qoff;
        T* dqi = dqkv + static_cast<std::int64_t>(i) * 3 * d + qoff;
        for (int j = 0; j < s; ++j) {
            const T* vj = qkv + static_cast<std::int64_t>(j) * 3 * d + voff;
            T dp = T(0);
            for (int c = 0; c < dh; ++c) dp += drow[c] * vj[c];
            const T ds = prow[j] * (dp - dp_dot) * inv_sqrt;
            const T* kj = qkv + static_cast<std::int64_t>(j) * 3 * d + koff;
            T* dkj = dqkv + static_cast<std::int64_t>(j) * 3 * d + koff;
            for (int c = 0; c < dh; ++c) {
                dqi[c] += ds * kj[c];
                dkj[c] += ds * qi[c];
            }
        }
    }
}

template <std::floating_point T>
void attention_backward_serial(const T* qkv, const T* probs, const T* dout, T* dqkv, int b, int s,
                               int d, int h) {
    const int dh = d / h;
    for (int idx = 0; idx < b * h; ++idx) {
        const int bi = idx / h;
        const int hi = idx % h;
        attention_head_backward(qkv + static_cast<std::int64_t>(bi) * s * 3 * d,
                                probs + static_cast<std::int64_t>(idx) * s * s,
                                dout + static_cast<std::int64_t>(bi) * s * d,
                                dqkv + static_cast<std::int64_t>(bi) * s * 3 * d, s, d, dh, hi);
    }
}

template <std::floating_point T>
void attention_backward_omp(const T* qkv, const T* probs, const T* dout, T* dqkv, int b, int s,
                            int d, int h) {
    const int dh = d / h;
#pragma omp parallel for schedule(static)
    for (int idx = 0; idx < b * h; ++idx) {
        const int bi = idx / h;
        const int hi = idx % h;
        attention_head_backward(qkv + static_cast<std::int64_t>(bi) * s * 3 * d,
                                probs + static_cast<std::int64_t>(idx) * s * s,
                                dout + static_cast<std::int64_t>(bi) * s * d,
                                dqkv + static_cast<std::int64_t>(bi) * s * 3 * d, s, d, dh, hi);
    }
}

template <std::floating_point T>
void attention_forward(const T* qkv, T* out, T* probs, int b, int s, int d, int h) {
    const std::int64_t work = static_cast<std::int64_t>(b) * h * s * s * (d / h);
    if (openmp_enabled() && work >= kParallelCutoff && b * h > 1) {
        attention_forward_omp(qkv, out, probs, b, s, d, h);
    } else {
        attention_forward_serial(qkv, out, probs, b, s, d, h);
    }
}

template <std::floating_point T>
void attention_backward(const T* qkv, const T* probs, const T* dout, T* dqkv, int b, int s, int d,
                        int h) {
    const std::int64_t work = static_cast<std::int64_t>(b) * h * s * s * (d / h);
    if (openmp_enabled() && work >= kParallelCutoff && b * h > 1) {
        attention_backward_omp(qkv, probs, dout, dqkv, b, s, d, h);
    } else {
        attention_backward_serial(qkv, probs, dout, dqkv, b, s, d, h);
    }
}

}  // namespace cprompt::kernels
