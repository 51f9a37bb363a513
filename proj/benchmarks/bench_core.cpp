#include <benchmark/benchmark.h>

#include <random>

#include "ushl/autodiff.hpp"
#include "ushl/experiment.hpp"

using namespace ushl;

namespace {

Tensor<float> random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// A small benchmark corpus prepared with the desk-scale engine.
struct Fixture {
  RunConfig cfg;
  std::vector<UserSample> users;
  ModelParams<float> params;

  explicit Fixture(std::size_t n_users) {
    SynthConfig s;
    s.train_users = n_users;
    cfg = benchmark_config(s);
    const auto raw = generate_split(cfg.synth, "train");
    cfg.engine = fit_engine(raw, cfg.engine);
    users = prepare_users(raw, cfg.engine, cfg.engine.max_clips);
    params = ModelParams<float>::init(cfg.engine, cfg.init_seed);
  }
};

void BM_Conv3dForwardBackward(benchmark::State& state) {
  const std::size_t n = state.range(0);
  const auto x = random_tensor({n, 8, 8, 4, 4}, 1);
  const auto w = random_tensor({8, 8, 3, 3, 3}, 2);
  ad::Conv3dOptions opt;
  opt.pad = {1, 1, 1};
  for (auto _ : state) {
    ad::Tape<float> tape;
    auto y = ad::conv3d(tape.variable(x), tape.variable(w), opt);
    auto g = tape.backward(ad::sum(y));
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Conv3dForwardBackward)->Arg(15)->Arg(60);

void BM_ScoreTarget(benchmark::State& state) {
  static const Fixture f(8);
  std::size_t i = 0;
  for (auto _ : state) {
    auto track = score_target(f.users[i++ % f.users.size()], f.params);
    benchmark::DoNotOptimize(track);
  }
  state.SetItemsProcessed(state.iterations());
}
BENCHMARK(BM_ScoreTarget)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  static const Fixture f(8);
  std::vector<const UserSample*> batch;
  for (const auto& u : f.users) batch.push_back(&u);
  for (auto _ : state) {
    auto g = batch_gradient(batch, f.params, f.cfg.loss);
    benchmark::DoNotOptimize(g);
  }
  state.SetItemsProcessed(state.iterations() * batch.size());
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
