#include <benchmark/benchmark.h>

#include "dkf/data.hpp"
#include "dkf/encoder.hpp"
#include "dkf/forecaster.hpp"
#include "dkf/training.hpp"

namespace {

dkf::EncoderConfig desk_config(dkf::EncoderVariant v) {
  dkf::EncoderConfig c;
  c.variant = v;
  c.context_len = 32;
  c.channels = 2;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_width = 32;
  c.patch_len = 16;
  c.ma_kernel = 15;
  return c;
}

dkf::WindowBatch desk_windows(std::size_t count) {
  dkf::SimulatorConfig sim = dkf::van_der_pol_defaults();
  const auto w = dkf::make_windows(dkf::simulate(sim).values, 32, 5);
  return w.slice(0, count);
}

}  // namespace

static void BM_FullAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const dkf::Matrix q = dkf::random_gaussian(n, 8, 1), k = dkf::random_gaussian(n, 8, 2),
                    v = dkf::random_gaussian(n, 8, 3);
  for (auto _ : state) benchmark::DoNotOptimize(dkf::full_attention(q, k, v));
}
BENCHMARK(BM_FullAttention)->Arg(32)->Arg(128);

static void BM_ProbSparseAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const dkf::Matrix q = dkf::random_gaussian(n, 8, 1), k = dkf::random_gaussian(n, 8, 2),
                    v = dkf::random_gaussian(n, 8, 3);
  for (auto _ : state) benchmark::DoNotOptimize(dkf::probsparse_attention(q, k, v, 5.0));
}
BENCHMARK(BM_ProbSparseAttention)->Arg(32)->Arg(128);

static void BM_Predict(benchmark::State& state) {
  const auto variant = static_cast<dkf::EncoderVariant>(state.range(0));
  const auto model = dkf::init_model(desk_config(variant), 5, 1);
  const auto batch = desk_windows(128);
  for (auto _ : state) benchmark::DoNotOptimize(dkf::predict(model, batch.x));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_Predict)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);

static void BM_LossAndGradient(benchmark::State& state) {
  const auto variant = static_cast<dkf::EncoderVariant>(state.range(0));
  const auto model = dkf::init_model(desk_config(variant), 5, 1);
  const auto batch = desk_windows(128);
  const dkf::TrainingConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(dkf::loss_and_gradient(model, batch, cfg));
  state.SetItemsProcessed(state.iterations() * 128);
}
BENCHMARK(BM_LossAndGradient)->DenseRange(0, 2)->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
