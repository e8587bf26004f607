// Copyright 2026 The peftlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "peftlab/kernels.hpp"
#include "peftlab/ops.hpp"
#include "peftlab/quant4.hpp"

namespace peftlab {
namespace {

std::vector<float> normal(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist;
  std::vector<float> v(n);
  for (float& x : v) x = dist(rng);
  return v;
}

// C[m, n] = A[m, k] B[n, k]^T; args are m, k, n.
void BM_GemmNt(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = normal(m * k, 1), b = normal(n * k, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    kernels::gemm_nt(a.data(), k, b.data(), k, c.data(), n, m, n, k);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["flops"] = benchmark::Counter(2.0 * double(m * k * n), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_GemmNt)->Args({170, 128, 128})->Args({170, 128, 512})->Args({170, 512, 128})->Args({170, 128, 260});

void BM_Quantize(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor w = Tensor::from_data({n / 128, 128}, normal(n, 3));
  const quant::QuantConfig cfg{64, state.range(1) != 0, 256};
  for (auto _ : state) benchmark::DoNotOptimize(quant::quantize(w, cfg));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_Quantize)->Args({1 << 16, 0})->Args({1 << 16, 1});

void BM_Dequantize(benchmark::State& state) {
  const std::size_t n = 1 << 16;
  const auto q = quant::quantize(Tensor::from_data({n / 128, 128}, normal(n, 4)), {});
  for (auto _ : state) benchmark::DoNotOptimize(quant::dequantize(q, DType::kF16));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}
BENCHMARK(BM_Dequantize);

// x[T, 128] times a 4-bit [out, 128] weight, against the dense f32 product.
void BM_Qmatmul(benchmark::State& state) {
  const std::size_t t = static_cast<std::size_t>(state.range(0)), in = 128, out = 512;
  const Tensor x = Tensor::from_data({t, in}, normal(t * in, 5));
  const Tensor w = Tensor::from_data({out, in}, normal(out * in, 6));
  auto q = std::make_shared<const quant::QuantizedTensor>(quant::quantize(w, {}));
  for (auto _ : state) {
    Graph g(Graph::Mode::kInference);
    benchmark::DoNotOptimize(quant::qmatmul(g, x, q));
  }
}
BENCHMARK(BM_Qmatmul)->Arg(1)->Arg(170);

void BM_DenseMatmulNt(benchmark::State& state) {
  const std::size_t t = static_cast<std::size_t>(state.range(0)), in = 128, out = 512;
  const Tensor x = Tensor::from_data({t, in}, normal(t * in, 5));
  const Tensor w = Tensor::from_data({out, in}, normal(out * in, 6));
  for (auto _ : state) {
    Graph g(Graph::Mode::kInference);
    benchmark::DoNotOptimize(ops::matmul_nt(g, x, w));
  }
}
BENCHMARK(BM_DenseMatmulNt)->Arg(1)->Arg(170);

}  // namespace
}  // namespace peftlab
