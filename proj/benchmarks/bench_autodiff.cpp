#include <benchmark/benchmark.h>

#include "refil/autodiff.hpp"
#include "refil/privacy.hpp"
#include "refil/reference_models.hpp"
#include "refil/rng.hpp"

namespace {

using namespace refil;

Model mlp_client(std::size_t width) {
  Rng rng(1);
  return mnist_mlp(width, rng).client();
}

Model cnn_client(CnnSplit split) {
  Rng rng(2);
  CnnOptions o;
  o.height = 32;
  o.width = 32;
  return residual_cnn(split, o, rng).client();
}

void BM_ForwardMlp(benchmark::State& state) {
  const Model m = mlp_client(static_cast<std::size_t>(state.range(0)));
  Rng rng(3);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  for (auto _ : state) benchmark::DoNotOptimize(forward(m, x));
}
BENCHMARK(BM_ForwardMlp)->Arg(1000)->Arg(10000);

void BM_JvpMlp(benchmark::State& state) {
  const Model m = mlp_client(static_cast<std::size_t>(state.range(0)));
  Rng rng(3);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  const Tensor v = rng.normal_tensor(m.input_shape());
  for (auto _ : state) benchmark::DoNotOptimize(jvp(m, x, v));
}
BENCHMARK(BM_JvpMlp)->Arg(1000)->Arg(10000);

void BM_VjpMlp(benchmark::State& state) {
  const Model m = mlp_client(static_cast<std::size_t>(state.range(0)));
  Rng rng(3);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  const Tensor u = rng.normal_tensor(m.output_shape());
  for (auto _ : state) benchmark::DoNotOptimize(vjp(m, x, u));
}
BENCHMARK(BM_VjpMlp)->Arg(1000)->Arg(10000);

void BM_JvpCnn(benchmark::State& state) {
  const Model m = cnn_client(static_cast<CnnSplit>(state.range(0)));
  Rng rng(4);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  const Tensor v = rng.normal_tensor(m.input_shape());
  for (auto _ : state) benchmark::DoNotOptimize(jvp(m, x, v));
}
BENCHMARK(BM_JvpCnn)->DenseRange(0, 2);

void BM_VjpCnn(benchmark::State& state) {
  const Model m = cnn_client(static_cast<CnnSplit>(state.range(0)));
  Rng rng(4);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  const Tensor u = rng.normal_tensor(m.output_shape());
  for (auto _ : state) benchmark::DoNotOptimize(vjp(m, x, u));
}
BENCHMARK(BM_VjpCnn)->DenseRange(0, 2);

void BM_TraceExactMlp(benchmark::State& state) {
  const Model m = mlp_client(1000);
  Rng rng(5);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  for (auto _ : state) benchmark::DoNotOptimize(trace_jtj_exact(m, x));
}
BENCHMARK(BM_TraceExactMlp)->Unit(benchmark::kMillisecond);

void BM_TraceHutchinsonCnn(benchmark::State& state) {
  const Model m = cnn_client(CnnSplit::Early);
  Rng rng(6);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  const auto k = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(trace_jtj_hutchinson(m, x, k, rng));
}
BENCHMARK(BM_TraceHutchinsonCnn)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_RefilForwardMlp(benchmark::State& state) {
  const Model m = mlp_client(1000);
  Rng rng(7);
  const Tensor x = rng.uniform_tensor(m.input_shape(), 0, 1);
  RefilConfig cfg;
  cfg.target_dfil = 1.0;
  cfg.estimator = HutchinsonTrace{16, 0};
  for (auto _ : state) benchmark::DoNotOptimize(refil_forward(m, x, cfg, rng));
}
BENCHMARK(BM_RefilForwardMlp)->Unit(benchmark::kMillisecond);

}  // namespace
