#include <benchmark/benchmark.h>

#include "rhosim/models.hpp"
#include "rhosim/sim.hpp"
#include "rhosim/train.hpp"

namespace {

using namespace rhosim;

void BM_matmul_f32(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  RngStream rng(1);
  auto a = random_normal<float>({n, n}, 0, 1, rng);
  auto b = random_normal<float>({n, n}, 0, 1, rng);
  for (auto _ : state) {
    auto c = matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_matmul_f32)->Arg(32)->Arg(64)->Arg(128);

void BM_conv2d_f32(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  RngStream rng(2);
  auto x = random_normal<float>({8, c, 16, 16}, 0, 1, rng);
  auto k = random_normal<float>({c, c, 3, 3}, 0, 1, rng);
  for (auto _ : state) {
    auto y = conv2d(x, k, 1, 1);
    benchmark::DoNotOptimize(y.data().data());
  }
}
BENCHMARK(BM_conv2d_f32)->Arg(8)->Arg(16);

void BM_sim_loss(benchmark::State& state) {
  const std::int64_t tokens = state.range(0);
  SimConfig cfg;
  cfg.rho = 0.2;
  cfg.proj_dim = 64;
  cfg.proj_hidden = 64;
  cfg.sim_seed = 3;
  std::vector<TapPlan> plans(1);
  plans[0].block_index = 0;
  plans[0].c_in = plans[0].c_out = 32;
  plans[0].n_in = plans[0].n_out = tokens;
  auto bank = SimBank<float>::init(plans, cfg);
  RngStream rng(4);
  std::vector<SimTap<float>> taps(1);
  taps[0].block_index = 0;
  taps[0].input_tokens = random_normal<float>({16, tokens, 32}, 0, 1, rng);
  taps[0].output_tokens = random_normal<float>({16, tokens, 32}, 0, 1, rng);
  std::uint64_t step = 0;
  for (auto _ : state) {
    auto res = bank.loss(taps, step++);
    benchmark::DoNotOptimize(res.report.total);
  }
}
BENCHMARK(BM_sim_loss)->Arg(64)->Arg(256);

void BM_train_step(benchmark::State& state) {
  // one optimizer step of the default-shaped mlp with the regularizer on
  TrainConfig cfg;
  cfg.model.widths = {2, 64, 64};
  cfg.data.n_train = 64;
  cfg.data.n_test = 2;
  cfg.optim.batch_size = 64;
  cfg.optim.epochs = 1;
  for (auto _ : state) {
    state.PauseTiming();  // fresh deterministic run each iteration
    state.ResumeTiming();
    RunArtifacts art = run_training(cfg);
    benchmark::DoNotOptimize(art.final_params_digest);
  }
}
BENCHMARK(BM_train_step)->Unit(benchmark::kMillisecond);

void BM_backward_mlp(benchmark::State& state) {
  auto model = build_mlp<float>({32, 128, 128}, 10, 5);
  RngStream rng(6);
  auto x = random_normal<float>({64, 32}, 0, 1, rng);
  std::vector<std::int64_t> labels(64);
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<std::int64_t>(i % 10);
  for (auto _ : state) {
    for (auto* p : model.parameters()) p->tensor.zero_grad();
    Tape<float> tape;
    Tape<float>::Scope scope(tape);
    auto loss = softmax_cross_entropy(model.forward(x), labels);
    tape.backward(loss);
    benchmark::DoNotOptimize(loss.item());
  }
}
BENCHMARK(BM_backward_mlp);

}  // namespace

BENCHMARK_MAIN();
