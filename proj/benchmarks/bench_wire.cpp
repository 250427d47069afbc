#include <benchmark/benchmark.h>

#include "refil/rng.hpp"
#include "refil/wire.hpp"

namespace {

using namespace refil;

void BM_EncodeDecodeActivation(benchmark::State& state) {
  Rng rng(1);
  ActivationPayload p;
  p.model_id = "cnn-early";
  p.tensor = rng.normal_tensor({static_cast<std::size_t>(state.range(0))});
  for (auto _ : state) {
    const auto bytes = encode(p);
    benchmark::DoNotOptimize(decode(bytes));
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0) * 4);
}
BENCHMARK(BM_EncodeDecodeActivation)->Arg(1000)->Arg(8192);

}  // namespace
