#include <benchmark/benchmark.h>

#include <numeric>

#include "abstractnet/experiment.hpp"
#include "abstractnet/layers.hpp"
#include "abstractnet/optim.hpp"
#include "abstractnet/shapes.hpp"

namespace an = abstractnet;

namespace {

an::Tensor random_input(an::Shape s, std::uint64_t seed) {
  an::SeededRng rng(seed);
  return an::rng_uniform(rng, s, 0.0, 1.0);
}

// Arguments: input channels, kernel size, spatial size.
void BM_ConvForward(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  const int k = static_cast<int>(st.range(1));
  const int hw = static_cast<int>(st.range(2));
  const an::ConvSpec spec = an::same_conv(c, c, k);
  an::LayerState state = an::LayerState::for_conv("conv", spec);
  const an::Tensor x = random_input({32, c, hw, hw}, 1);
  for (auto _ : st) {
    benchmark::DoNotOptimize(an::conv_forward(x, spec, state));
  }
  st.SetItemsProcessed(st.iterations() * 32);
}
BENCHMARK(BM_ConvForward)->Args({1, 5, 32})->Args({8, 1, 16})->Args({4, 3, 16})->Args({2, 5, 16});

void BM_ConvBackward(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  const int k = static_cast<int>(st.range(1));
  const int hw = static_cast<int>(st.range(2));
  const an::ConvSpec spec = an::same_conv(c, c, k);
  an::LayerState state = an::LayerState::for_conv("conv", spec);
  const an::Tensor x = random_input({32, c, hw, hw}, 1);
  const an::Tensor dy = random_input(spec.output_shape(x.shape()), 2);
  for (auto _ : st) {
    benchmark::DoNotOptimize(an::conv_backward(x, dy, spec, state));
  }
  st.SetItemsProcessed(st.iterations() * 32);
}
BENCHMARK(BM_ConvBackward)->Args({1, 5, 32})->Args({8, 1, 16})->Args({4, 3, 16})->Args({2, 5, 16});

// Arguments: channels, window, stride, pad, spatial size.
void BM_MaxPool(benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  const int k = static_cast<int>(st.range(1));
  const int stride = static_cast<int>(st.range(2));
  const int pad = static_cast<int>(st.range(3));
  const int hw = static_cast<int>(st.range(4));
  const an::PoolSpec spec{an::PoolKind::max, k, k, stride, stride, pad, pad};
  const an::Tensor x = random_input({32, c, hw, hw}, 6);
  for (auto _ : st) {
    benchmark::DoNotOptimize(an::pool_forward(x, spec));
  }
  st.SetItemsProcessed(st.iterations() * 32);
}
BENCHMARK(BM_MaxPool)->Args({8, 3, 1, 1, 16})->Args({16, 3, 1, 1, 16})->Args({8, 2, 2, 0, 32});

void BM_MiniForward(benchmark::State& st) {
  an::SeededRng rng(3);
  const an::Network net = an::Network::build(an::mini_spec(), rng);
  const an::Tensor x = random_input(net.spec().input_shape(32), 4);
  for (auto _ : st) {
    benchmark::DoNotOptimize(net.forward(x, an::Mode::eval));
  }
  st.SetItemsProcessed(st.iterations() * 32);
}
BENCHMARK(BM_MiniForward)->Unit(benchmark::kMillisecond);

// One optimizer iteration: forward, backward and ADAGRAD update on batch 32.
void BM_MiniTrainStep(benchmark::State& st) {
  an::SeededRng rng(3);
  an::Network net = an::Network::build(an::mini_spec(), rng);
  const an::Tensor x = random_input(net.spec().input_shape(32), 4);
  std::vector<int> labels(32);
  for (int i = 0; i < 32; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  const an::OptimConfig optim;
  an::SeededRng drop(5);
  for (auto _ : st) {
    const an::ForwardPass pass = net.forward(x, an::Mode::train, &drop);
    benchmark::DoNotOptimize(net.backward(pass, labels));
    an::apply_update(net.states(), optim);
  }
  st.SetItemsProcessed(st.iterations() * 32);
}
BENCHMARK(BM_MiniTrainStep)->Unit(benchmark::kMillisecond);

void BM_Rasterize(benchmark::State& st) {
  const auto family = static_cast<an::ShapeFamily>(st.range(0));
  const an::RenderParams params;
  std::uint64_t seed = 0;
  for (auto _ : st) {
    benchmark::DoNotOptimize(an::rasterize(an::gen_scene(family, an::ShapeClass::horizontal, ++seed, params)));
  }
  st.SetLabel(an::to_string(family));
}
BENCHMARK(BM_Rasterize)->DenseRange(0, 6);

}  // namespace

int main(int argc, char** argv) {
  // Match the allocator behaviour of train() so timings exclude page faults.
  an::retain_freed_memory();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
