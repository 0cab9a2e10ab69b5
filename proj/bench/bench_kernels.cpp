// Parallel kernels against their serial references on network-sized inputs.
// Run with OMP_NUM_THREADS set to compare thread counts.

#include "cfreg/kernels.hpp"
#include "cfreg/reference.hpp"

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

using namespace cfreg;

namespace {

std::vector<float> random_buffer(std::size_t n, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(lo, hi);
    std::vector<float> v(n);
    for (auto& x : v) {
        x = u(rng);
    }
    return v;
}

Dims cube(const benchmark::State& state) { return {int(state.range(0)), int(state.range(0)), int(state.range(0))}; }

struct ConvCase {
    Dims s;
    int cin, cout, k = 3;
    std::vector<float> x, w, b, y, dy, dx, dw, db;

    explicit ConvCase(const benchmark::State& state)
        : s(cube(state)), cin(int(state.range(1))), cout(int(state.range(1)))
    {
        const auto n = std::size_t(s.voxels());
        x = random_buffer(n * cin, 1);
        w = random_buffer(std::size_t(cout) * cin * k * k * k, 2, -0.1f, 0.1f);
        b = random_buffer(cout, 3);
        y.assign(n * cout, 0.0f);
        dy = random_buffer(n * cout, 4);
        dx.assign(n * cin, 0.0f);
        dw.assign(w.size(), 0.0f);
        db.assign(cout, 0.0f);
    }
};

template <bool Parallel>
void conv_forward(benchmark::State& state)
{
    ConvCase c(state);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::conv3d_forward(c.x.data(), c.cin, c.s, c.w.data(), c.b.data(), c.cout, c.k, c.y.data());
        } else {
            reference::conv3d_forward(c.x.data(), c.cin, c.s, c.w.data(), c.b.data(), c.cout, c.k, c.y.data());
        }
        benchmark::DoNotOptimize(c.y.data());
    }
}

template <bool Parallel>
void conv_backward(benchmark::State& state)
{
    ConvCase c(state);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::conv3d_backward(c.x.data(), c.cin, c.s, c.w.data(), c.cout, c.k, c.dy.data(), c.dx.data(),
                                     c.dw.data(), c.db.data());
        } else {
            reference::conv3d_backward(c.x.data(), c.cin, c.s, c.w.data(), c.cout, c.k, c.dy.data(), c.dx.data(),
                                       c.dw.data(), c.db.data());
        }
        benchmark::DoNotOptimize(c.dw.data());
    }
}

template <bool Parallel>
void pointwise(benchmark::State& state)
{
    const Dims s = cube(state);
    const int c = int(state.range(1));
    const auto x = random_buffer(std::size_t(s.voxels()) * c, 1);
    const auto w = random_buffer(std::size_t(c) * c, 2);
    const auto b = random_buffer(c, 3);
    std::vector<float> y(x.size());
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::pointwise_forward(x.data(), c, s.voxels(), w.data(), b.data(), c, y.data());
        } else {
            reference::pointwise_forward(x.data(), c, s.voxels(), w.data(), b.data(), c, y.data());
        }
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void warp_fwd(benchmark::State& state)
{
    const Dims s = cube(state);
    const auto n = std::size_t(s.voxels());
    const auto src = random_buffer(n, 1);
    const auto field = random_buffer(3 * n, 2, -3.0f, 3.0f);
    std::vector<float> out(n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::warp_forward(src.data(), 1, s, field.data(), out.data());
        } else {
            reference::warp_forward(src.data(), 1, s, field.data(), out.data());
        }
        benchmark::DoNotOptimize(out.data());
    }
}

template <bool Parallel>
void warp_bwd(benchmark::State& state)
{
    const Dims s = cube(state);
    const auto n = std::size_t(s.voxels());
    const auto src = random_buffer(n, 1);
    const auto field = random_buffer(3 * n, 2, -3.0f, 3.0f);
    const auto dout = random_buffer(n, 3);
    std::vector<float> dsrc(n), dfield(3 * n);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::warp_backward(src.data(), 1, s, field.data(), dout.data(), dsrc.data(), dfield.data());
        } else {
            reference::warp_backward(src.data(), 1, s, field.data(), dout.data(), dsrc.data(), dfield.data());
        }
        benchmark::DoNotOptimize(dfield.data());
    }
}

template <bool Parallel>
void attention(benchmark::State& state)
{
    const Dims s = cube(state);
    const int c = 32, heads = 4, window = 5, shift = int(state.range(1));
    const auto qkv = random_buffer(std::size_t(s.voxels()) * 3 * c, 1);
    const auto table = random_buffer(std::size_t((2 * window - 1) * (2 * window - 1) * (2 * window - 1)) * heads, 2);
    std::vector<float> out(std::size_t(s.voxels()) * c);
    const auto part = kernels::WindowPartition::make(s, window, shift);
    for (auto _ : state) {
        if constexpr (Parallel) {
            kernels::window_attention_forward(part, qkv.data(), c, heads, table.data(), out.data(), nullptr);
        } else {
            reference::window_attention_forward(s, window, shift, qkv.data(), c, heads, table.data(), out.data());
        }
        benchmark::DoNotOptimize(out.data());
    }
}

} // namespace

BENCHMARK(conv_forward<false>)->Name("conv3d_forward/reference")->Args({24, 16})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(conv_forward<true>)->Name("conv3d_forward/kernel")->Args({24, 16})->Args({32, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward<false>)->Name("conv3d_backward/reference")->Args({24, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(conv_backward<true>)->Name("conv3d_backward/kernel")->Args({24, 16})->Unit(benchmark::kMillisecond);
BENCHMARK(pointwise<false>)->Name("pointwise/reference")->Args({32, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(pointwise<true>)->Name("pointwise/kernel")->Args({32, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(warp_fwd<false>)->Name("warp_forward/reference")->Arg(48)->Arg(96)->Unit(benchmark::kMillisecond);
BENCHMARK(warp_fwd<true>)->Name("warp_forward/kernel")->Arg(48)->Arg(96)->Unit(benchmark::kMillisecond);
BENCHMARK(warp_bwd<false>)->Name("warp_backward/reference")->Arg(48)->Unit(benchmark::kMillisecond);
BENCHMARK(warp_bwd<true>)->Name("warp_backward/kernel")->Arg(48)->Unit(benchmark::kMillisecond);
BENCHMARK(attention<false>)->Name("window_attention/reference")->Args({20, 0})->Args({20, 2})->Unit(benchmark::kMillisecond);
BENCHMARK(attention<true>)->Name("window_attention/kernel")->Args({20, 0})->Args({20, 2})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
