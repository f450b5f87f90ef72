#include <benchmark/benchmark.h>

#include "dkf/koopman.hpp"
#include "dkf/linalg.hpp"

static void BM_HouseholderQr(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const dkf::Matrix a = dkf::random_gaussian(n, n, 1);
  for (auto _ : state) benchmark::DoNotOptimize(dkf::householder_qr(a));
}
BENCHMARK(BM_HouseholderQr)->Arg(8)->Arg(16)->Arg(64);

static void BM_SpectralNorm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const dkf::Matrix a = dkf::random_gaussian(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(dkf::spectral_norm(a));
}
BENCHMARK(BM_SpectralNorm)->Arg(8)->Arg(16)->Arg(64);

static void BM_Materialize(benchmark::State& state) {
  std::mt19937_64 rng(3);
  const auto op = dkf::StableKoopmanOperator::init(static_cast<std::size_t>(state.range(0)), 0.99, rng);
  for (auto _ : state) benchmark::DoNotOptimize(dkf::materialize(op));
}
BENCHMARK(BM_Materialize)->Arg(16)->Arg(64);
