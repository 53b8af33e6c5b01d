#include <benchmark/benchmark.h>

#include <random>

#include "fln/data.hpp"
#include "fln/fln.hpp"
#include "fln/train.hpp"

using namespace fln;

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(rows * cols);
  for (double& x : v) x = u(rng);
  return Tensor::from({rows, cols}, std::move(v));
}

ObservationBundle sample_bundle(const BranchConfig& bc, std::size_t horizon, std::size_t agents) {
  SyntheticConfig c;
  c.scenes = 1;
  c.steps = bc.lengths[2] + horizon;
  c.min_agents = agents;
  c.max_agents = agents;
  return derive_observations(generate_synthetic(c).front(), bc.lengths, horizon);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Tensor a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(128);

void BM_Forward(benchmark::State& state) {
  BackboneConfig bb;
  BranchConfig bc;
  const FlnModel model = make_fln_model(bb, bc, 1);
  const auto bundle = sample_bundle(bc, bb.horizon, static_cast<std::size_t>(state.range(0)));
  NoGradGuard no_grad;
  for (auto _ : state) benchmark::DoNotOptimize(model.forward(bundle.observation(BranchId::L), BranchId::L));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(4)->Arg(8);

void BM_FlnTrainingStep(benchmark::State& state) {
  BackboneConfig bb;
  BranchConfig bc;
  FlnModel model = make_fln_model(bb, bc, 1);
  const auto bundle = sample_bundle(bc, bb.horizon, 4);
  AdamState adam;
  for (auto _ : state) {
    model.params().zero_grad();
    backward(fln_loss(model, bundle, bc).total);
    adam_step(model.params(), adam, 1e-3);
  }
}
BENCHMARK(BM_FlnTrainingStep);

}  // namespace
BENCHMARK_MAIN();
