// Serial against OpenMP timings for the hot kernels.

#include <benchmark/benchmark.h>

#include <random>

#include "svmu/kernels.hpp"

using namespace svmu;

namespace {

struct Fixture {
  NetworkSpec spec = parse_network("mnist-small", {28, 28, 1}, 10);
  ParamVector params = init_params(spec, 1);
  std::vector<Sample> samples;
  std::vector<const Sample*> ptrs;

  explicit Fixture(int n) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    samples.resize(static_cast<std::size_t>(n));
    for (auto& s : samples) {
      s.input.resize(spec.input_shape().size());
      for (double& v : s.input) v = u(rng);
      s.label = 1 + static_cast<int>(rng() % 10);
    }
    for (const auto& s : samples) ptrs.push_back(&s);
  }
};

kernels::Exec mode(const benchmark::State& st) { return st.range(1) ? kernels::Exec::parallel : kernels::Exec::serial; }

void BM_Gram(benchmark::State& st) {
  const auto M = static_cast<std::size_t>(st.range(0));
  const std::size_t P = 6000;
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> data(M, std::vector<double>(P));
  for (auto& r : data)
    for (double& v : r) v = n(rng);
  std::vector<std::span<const double>> rows(data.begin(), data.end());
  std::vector<double> out(M * M);
  for (auto _ : st) {
    if (mode(st) == kernels::Exec::parallel) kernels::gram_parallel(rows, out);
    else kernels::gram_serial(rows, out);
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(M * M));
}

void BM_Jacobians(benchmark::State& st) {
  const Fixture f(static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(kernels::batch_jacobians(f.spec, f.params, f.ptrs, mode(st)));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_Forward(benchmark::State& st) {
  const Fixture f(static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(kernels::batch_forward(f.spec, f.params, f.ptrs, mode(st)));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_HingeGradient(benchmark::State& st) {
  const Fixture f(static_cast<int>(st.range(0)));
  for (auto _ : st) benchmark::DoNotOptimize(kernels::mean_hinge_gradient(f.spec, f.params, f.ptrs, mode(st)));
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

}  // namespace

BENCHMARK(BM_Gram)->ArgsProduct({{128, 512}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Jacobians)->ArgsProduct({{32, 128}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Forward)->ArgsProduct({{256}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HingeGradient)->ArgsProduct({{256}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK_MAIN();
