#include <benchmark/benchmark.h>

#include <random>

#include "tstcnn/model.hpp"
#include "tstcnn/ops.hpp"
#include "tstcnn/optim.hpp"

using namespace tstcnn;

namespace {

TensorF random_tensor(Shape s, std::uint64_t seed) {
  TensorF t(std::move(s));
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0, 1);
  for (auto& v : t.mutable_data()) v = d(rng);
  return t;
}

void BM_Conv3dForward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  auto p = nn::Conv3dParams<float>::make(c, c, {3, 3, 3}, true);
  std::mt19937_64 rng(1);
  he_normal(p.weight, rng);
  auto x = random_tensor(Shape{10, c, 16, 32, 32}, 2);
  for (auto _ : state) {
    Tape<float> tape(false);
    benchmark::DoNotOptimize(nn::conv3d(tape, x, p).data().data());
  }
  state.SetItemsProcessed(state.iterations() * 10);
}
BENCHMARK(BM_Conv3dForward)->Arg(3)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_Conv3dBackward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  auto p = nn::Conv3dParams<float>::make(c, c, {3, 3, 3}, true);
  std::mt19937_64 rng(1);
  he_normal(p.weight, rng);
  p.weight.set_requires_grad(true);
  p.bias.set_requires_grad(true);
  auto x = random_tensor(Shape{10, c, 16, 32, 32}, 2).set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    auto loss = ops::sum(tape, nn::conv3d(tape, x, p));
    tape.backward(loss);
    x.clear_grad();
    p.weight.clear_grad();
    p.bias.clear_grad();
  }
}
BENCHMARK(BM_Conv3dBackward)->Arg(3)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_AttentionBlock(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const bool backward = state.range(1) != 0;
  auto a = AttentionBlock<float>::make(n);
  std::mt19937_64 rng(3);
  a.init(rng);
  auto x = random_tensor(Shape{10, n, 8, 16, 16}, 4);
  if (backward) x.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape(backward);
    auto out = a.forward(tape, x, nn::Mode::train);
    if (backward) {
      tape.backward(ops::sum(tape, out.y));
      x.clear_grad();
    }
    benchmark::DoNotOptimize(out.y.data().data());
  }
}
BENCHMARK(BM_AttentionBlock)->Args({8, 0})->Args({8, 1})->Unit(benchmark::kMillisecond);

void BM_TwinTrainStep(benchmark::State& state) {
  auto c = ModelConfig::desk_scale(ModelKind::twin, BlockMode::attention, 1);
  c.filters = {8, 8, 8};
  c.fc_width = 64;
  Network<float> net(c);
  net.initialize(5);
  ModelInput<float> in{random_tensor(Shape{10, 3, 16, 32, 32}, 6), random_tensor(Shape{10, 2, 16, 32, 32}, 7)};
  const int labels[] = {0, 1, 2, 3, 4, 5, 0, 1, 2, 3};
  const auto params = net.parameters();
  for (auto _ : state) {
    Tape<float> tape;
    auto out = net.forward(tape, in, nn::Mode::train);
    tape.backward(nn::softmax_cross_entropy(tape, out.logits, labels));
    zero_grad(params);
  }
}
BENCHMARK(BM_TwinTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
