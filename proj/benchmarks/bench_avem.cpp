#include "avem/exact_em.hpp"
#include "avem/hmm.hpp"
#include "avem/kalman.hpp"
#include "avem/mhmm.hpp"
#include "avem/rng.hpp"
#include "avem/simlab.hpp"

#include <benchmark/benchmark.h>

using namespace avem;

namespace {

sim::Simulated scenario(Index n, Index T, Index K, Index d) {
  sim::ScenarioSpec s;
  s.n = n;
  s.T = T;
  s.K = K;
  s.d = d;
  s.seed = 17;
  return sim::generate(s);
}

}  // namespace

static void BM_ForwardBackward(benchmark::State& state) {
  const Index T = state.range(0);
  const Index K = state.range(1);
  const auto s = scenario(1, T, K, 1);
  const MatrixXd le = s.truth.emission->log_emission_matrix(VectorXd::Zero(1), s.data[0]);
  for (auto _ : state) benchmark::DoNotOptimize(hmm::forward_backward(le, s.truth.chain));
  state.SetItemsProcessed(state.iterations() * T);
}
BENCHMARK(BM_ForwardBackward)->Args({100, 2})->Args({100, 4})->Args({1000, 2})->Args({1000, 4});

static void BM_KalmanSmoother(benchmark::State& state) {
  const Index T = state.range(0);
  kalman::LgssmSpec spec;
  spec.G = (MatrixXd(2, 2) << 0.8, 0.1, -0.1, 0.7).finished();
  spec.H = (MatrixXd(4, 2) << 1, 0, 0, 1, 0.5, 0.5, -0.3, 0.8).finished();
  spec.r = VectorXd::Constant(4, 0.5);
  spec.m0 = VectorXd::Zero(2);
  spec.P0 = MatrixXd::Identity(2, 2);
  Rng rng(3);
  NormalSampler nd;
  MatrixXd data(T, 4);
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < 4; ++j) data(t, j) = nd(rng);
  for (auto _ : state) benchmark::DoNotOptimize(kalman::smooth(spec, data));
  state.SetItemsProcessed(state.iterations() * T);
}
BENCHMARK(BM_KalmanSmoother)->Arg(100)->Arg(1000);

static void BM_AvemIteration(benchmark::State& state) {
  const auto s = scenario(state.range(0), 60, 3, 2);
  const auto init = mhmm::default_init_gaussian(s.data, 3);
  mhmm::AvemConfig c;
  c.max_iter = 1;
  for (auto _ : state) benchmark::DoNotOptimize(mhmm::fit_mhmm(s.data, init, c));
}
BENCHMARK(BM_AvemIteration)->Arg(20)->Arg(60)->Unit(benchmark::kMillisecond);

static void BM_QemIteration(benchmark::State& state) {
  const auto s = scenario(60, 60, 3, 2);
  const auto init = mhmm::default_init_gaussian(s.data, 3);
  mhmm::AvemConfig c;
  c.max_iter = 1;
  const int J = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(exact::fit_qem(s.data, init, J, c));
}
BENCHMARK(BM_QemIteration)->Arg(3)->Arg(9)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
