#include <benchmark/benchmark.h>

#include <random>

#include "fsad/attacks.hpp"
#include "fsad/detection.hpp"
#include "fsad/filters.hpp"
#include "fsad/ops.hpp"
#include "fsad/random.hpp"

using namespace fsad;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

const data::Dataset& test_set() {
  static const data::Dataset ds = [] {
    data::SyntheticSpec spec;
    spec.n_classes = 20;
    return data::generate_synthetic(spec);
  }();
  return ds;
}

models::FewShotModel frozen_model(models::HeadKind head) {
  models::ModelConfig mc;
  mc.head = head;
  models::FewShotModel m(mc);
  m.set_trainable(false);
  return m;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int channels = static_cast<int>(state.range(0));
  const ag::Var w(uniform({channels, channels, 3, 3}, 2), true);
  const ag::Var b(Tensor({channels}), true);
  const Tensor x = uniform({25, channels, 16, 16}, 1);
  for (auto _ : state) {
    ag::Var in(x, true);
    ag::backward(ag::sum(ag::conv2d(in, w, b, 1)));
    benchmark::DoNotOptimize(in.grad());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ClassifyEpisode(benchmark::State& state) {
  const auto m = frozen_model(static_cast<models::HeadKind>(state.range(0)));
  const auto ep = data::sample_episode(test_set(), 5, 5, 75, 3);
  for (auto _ : state) benchmark::DoNotOptimize(m.classify(ep.support, 5, 5, ep.query));
}
BENCHMARK(BM_ClassifyEpisode)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PgdStep(benchmark::State& state) {
  const auto m = frozen_model(models::HeadKind::relation);
  const auto ep = data::sample_episode_with_fixed_target(test_set(), 5, 5, 75, 0, std::nullopt, 4);
  const auto ctx = attacks::context_from_episode(ep);
  const Tensor x = ep.slot_support(0);
  for (auto _ : state) benchmark::DoNotOptimize(attacks::attack_loss(m, x, ctx, attacks::AttackKind::pgd, 0.1));
}
BENCHMARK(BM_PgdStep)->Unit(benchmark::kMillisecond);

void BM_Auroc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::normal_distribution<double> g;
  std::vector<double> clean(n), adv(n);
  for (auto& v : clean) v = g(rng);
  for (auto& v : adv) v = g(rng) + 1.0;
  for (auto _ : state) benchmark::DoNotOptimize(detection::auroc(clean, adv));
  state.SetComplexityN(static_cast<benchmark::IterationCount>(n));
}
BENCHMARK(BM_Auroc)->Range(1 << 8, 1 << 16)->Complexity(benchmark::oNLogN);

void BM_MedianFilter(benchmark::State& state) {
  const Tensor s = uniform({4, 3, 16, 16}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(filters::median_filter_2x2(s));
}
BENCHMARK(BM_MedianFilter);

void BM_NoiseFilter(benchmark::State& state) {
  const Tensor s = uniform({4, 3, 16, 16}, 7);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(filters::channel_noise(s, seed++));
}
BENCHMARK(BM_NoiseFilter);

void BM_AutoencoderReconstruct(benchmark::State& state) {
  const filters::Autoencoder ae{filters::AutoencoderConfig{}};
  const Tensor s = uniform({4, 3, 16, 16}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(ae.reconstruct(s));
}
BENCHMARK(BM_AutoencoderReconstruct)->Unit(benchmark::kMicrosecond);

void BM_ScoreSupport(benchmark::State& state) {
  const auto m = frozen_model(models::HeadKind::relation);
  const auto sampler = detection::random_context(test_set(), 0, 5, 4);
  const Tensor support = test_set().batch(0, {0, 1, 2, 3, 4});
  const auto stat = static_cast<detection::Statistic>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(detection::score_support_set(m, filters::Filter::median(), support, sampler, stat,
                                                          detection::default_split_mode(stat), seed++));
  }
}
BENCHMARK(BM_ScoreSupport)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
