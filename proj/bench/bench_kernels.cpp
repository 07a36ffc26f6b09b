// Production kernels against the serial reference, plus one toy training step.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "cstr/kernels.hpp"
#include "cstr/trainer.hpp"

namespace k = cstr::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(gen);
  return v;
}

// Third stage of the toy backbone at batch 32: 24 channels on 8 x 32.
k::ConvGeometry toy_conv() {
  k::ConvGeometry g;
  g.batch = 32;
  g.in_channels = g.out_channels = 24;
  g.in_h = 8;
  g.in_w = 32;
  g.kernel_h = g.kernel_w = 3;
  g.pad_top = g.pad_bottom = g.pad_left = g.pad_right = 1;
  return g;
}

template <bool Fast>
void BM_Gemm(benchmark::State& state) {
  const auto n = state.range(0);
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    if constexpr (Fast) k::gemm<float>(false, false, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.data(), n);
    else k::reference::gemm<float>(false, false, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}

template <bool Fast>
void BM_ConvForward(benchmark::State& state) {
  const auto g = toy_conv();
  const auto x = random_vec(g.batch * g.in_channels * g.in_h * g.in_w, 3);
  const auto w = random_vec(g.out_channels * g.col_rows(), 4);
  std::vector<float> y(g.batch * g.out_channels * g.out_plane()), cols;
  for (auto _ : state) {
    if constexpr (Fast) k::conv2d_forward<float>(g, x, w, {}, y, &cols);
    else k::reference::conv2d_forward<float>(g, x, w, {}, y);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Fast>
void BM_ConvBackward(benchmark::State& state) {
  const auto g = toy_conv();
  const auto x = random_vec(g.batch * g.in_channels * g.in_h * g.in_w, 5);
  const auto w = random_vec(g.out_channels * g.col_rows(), 6);
  const auto dy = random_vec(g.batch * g.out_channels * g.out_plane(), 7);
  std::vector<float> y(dy.size()), cols, dx(x.size()), dw(w.size());
  k::conv2d_forward<float>(g, x, w, {}, y, &cols);
  for (auto _ : state) {
    if constexpr (Fast) k::conv2d_backward<float>(g, dy, w, cols, dx, dw, {});
    else k::reference::conv2d_backward<float>(g, x, dy, w, dx, dw, {});
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Fast>
void BM_MaxPool(benchmark::State& state) {
  const std::int64_t planes = 32 * 24, h = 16, w = 64;
  const auto x = random_vec(planes * h * w, 8);
  std::vector<float> y(planes * (h / 2) * (w / 2));
  std::vector<std::int64_t> arg(y.size());
  for (auto _ : state) {
    if constexpr (Fast) k::maxpool2x2_forward<float>(planes, h, w, x, y, arg);
    else k::reference::maxpool2x2_forward<float>(planes, h, w, x, y, arg);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_ToyTrainStep(benchmark::State& state) {
  cstr::CstrModel model(cstr::ModelConfig{}, 1);
  cstr::Tensor batch({32, 1, 16, 64});
  for (std::int64_t i = 0; i < batch.numel(); ++i) batch.set(i, static_cast<double>(i % 7) / 7.0);
  const std::vector<std::string> words(32, "cat");
  cstr::OptimizerState opt;
  for (auto _ : state) {
    cstr::Graph g(model.params(), {cstr::Precision::f32, true, true});
    cstr::Var loss = model.loss(model.logits(g.constant(batch)), words);
    g.backward(loss);
    cstr::adadelta_step(model.params(), g.parameter_grads(), opt, 1.0);
    g.commit_buffers(model.params());
  }
}

}  // namespace

BENCHMARK(BM_Gemm<true>)->Name("gemm/fast")->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<false>)->Name("gemm/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_ConvForward<true>)->Name("conv_forward/fast");
BENCHMARK(BM_ConvForward<false>)->Name("conv_forward/reference");
BENCHMARK(BM_ConvBackward<true>)->Name("conv_backward/fast");
BENCHMARK(BM_ConvBackward<false>)->Name("conv_backward/reference");
BENCHMARK(BM_MaxPool<true>)->Name("maxpool/fast");
BENCHMARK(BM_MaxPool<false>)->Name("maxpool/reference");
BENCHMARK(BM_ToyTrainStep)->Name("toy_train_step/batch32")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
