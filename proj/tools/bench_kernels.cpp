#include <chrono>
#include <cstdio>
#include <vector>

#include "cprompt/kernels.hpp"
#include "cprompt/rng.hpp"

namespace {

using cprompt::Rng;

// Median-of-repeats wall time for one invocation of fn, in microseconds.
template <typename Fn>
double time_us(Fn fn, int repeats) {
    std::vector<double> samples;
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        samples.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

void bench_matmul(int m, int k, int n, int repeats) {
    Rng rng(1);
    std::vector<double> a(static_cast<std::size_t>(m) * k);
    std::vector<double> b(static_cast<std::size_t>(k) * n);
    for (auto& x : a) x = rng.normal();
    for (auto& x : b) x = rng.normal();
    std::vector<double> c_serial(static_cast<std::size_t>(m) * n);
    std::vector<double> c_omp(c_serial.size());

    const double us_serial = time_us(
        [&] { cprompt::kernels::matmul_nn_serial(a.data(), b.data(), c_serial.data(), m, k, n, false); },
        repeats);
    const double us_omp = time_us(
        [&] { cprompt::kernels::matmul_nn_omp(a.data(), b.data(), c_omp.data(), m, k, n, false); },
        repeats);
    std::printf("matmul_nn  %4dx%4dx%4d  serial %10.1f us  omp %10.1f us  speedup %5.2fx  max|d| %g\n",
                m, k, n, us_serial, us_omp, us_serial / us_omp,
                max_abs_diff(c_serial, c_omp));
}

void bench_attention(int batch, int s, int d, int heads, int repeats) {
    Rng rng(2);
    std::vector<double> qkv(static_cast<std::size_t>(batch) * s * 3 * d);
    for (auto& x : qkv) x = rng.normal();
    std::vector<double> out_serial(static_cast<std::size_t>(batch) * s * d);
    std::vector<double> out_omp(out_serial.size());
    std::vector<double> probs_serial(static_cast<std::size_t>(batch) * heads * s * s);
    std::vector<double> probs_omp(probs_serial.size());

    const double us_serial = time_us(
        [&] {
            cprompt::kernels::attention_forward_serial(qkv.data(), out_serial.data(),
                                              probs_serial.data(), batch, s, d, heads);
        },
        repeats);
    const double us_omp = time_us(
        [&] {
            cprompt::kernels::attention_forward_omp(qkv.data(), out_omp.data(), probs_omp.data(), batch,
                                           s, d, heads);
        },
        repeats);
    std::printf("attention  b%-3d s%-4d d%-4d h%-2d serial %10.1f us  omp %10.1f us  speedup %5.2fx  max|d| %g\n",
                batch, s, d, heads, us_serial, us_omp, us_serial / us_omp,
                max_abs_diff(out_serial, out_omp));
}

}  // namespace

int main() {
    std::printf("openmp %s, %d thread(s)\n", cprompt::kernels::openmp_enabled() ? "on" : "off",
                cprompt::kernels::thread_count());
    bench_matmul(64, 64, 64, 21);
    bench_matmul(256, 256, 256, 11);
    bench_matmul(512, 512, 512, 5);
    bench_attention(16, 32, 64, 2, 21);
    bench_attention(64, 64, 128, 4, 5);
    return 0;
}
