#include <benchmark/benchmark.h>

#include <random>

#include "apnea/layers.hpp"
#include "apnea/model.hpp"
#include "apnea/scoring.hpp"
#include "apnea/signal.hpp"
#include "apnea/training.hpp"

using namespace apnea;
using namespace apnea::nn;

namespace {

Tensor randn(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

data::WindowInstance random_instance(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  data::WindowInstance inst;
  inst.ecg_ctx.resize(spec.ecg_input_len());
  for (auto& v : inst.ecg_ctx) v = u(rng);
  inst.spo2_ctx.resize(spec.sequence_len());
  for (auto& v : inst.spo2_ctx) v = u(rng);
  inst.labels.assign(static_cast<std::size_t>(spec.output_len), 0);
  return inst;
}

} // namespace

// One hour of 80 Hz ECG.
static void BM_Bandpass(benchmark::State& state) {
  const auto x = randn({80 * 3600}, 1);
  const auto ch = signal::SignalChannel::from_samples(x.vector(), 80.0);
  for (auto _ : state) benchmark::DoNotOptimize(signal::butterworth_bandpass(ch, {}));
  state.SetItemsProcessed(state.iterations() * static_cast<long>(x.size()));
}
BENCHMARK(BM_Bandpass)->Unit(benchmark::kMillisecond);

static void BM_DepthwiseConv(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const Var x(randn({8, 16, t}, 2)), w(randn({16, 3}, 3));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(depthwise_conv1d(x, w, 4).value());
}
BENCHMARK(BM_DepthwiseConv)->Arg(900)->Arg(3600)->Unit(benchmark::kMicrosecond);

static void BM_PointwiseConv(benchmark::State& state) {
  const Var x(randn({8, 16, 3600}, 4)), w(randn({16, 16}, 5)), b(randn({16}, 6));
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(pointwise_conv1d(x, w, b).value());
}
BENCHMARK(BM_PointwiseConv)->Unit(benchmark::kMicrosecond);

static void BM_LstmForwardBackward(benchmark::State& state) {
  const std::size_t h = 16;
  for (auto _ : state) {
    Var x(randn({8, 180, 16}, 7), true), wi(randn({4 * h, 16}, 8), true), wh(randn({4 * h, h}, 9), true),
        b(randn({4 * h}, 10), true);
    backward(dot(lstm(x, wi, wh, b, false), randn({8, 180, h}, 11)));
    benchmark::DoNotOptimize(wi.grad());
  }
}
BENCHMARK(BM_LstmForwardBackward)->Unit(benchmark::kMillisecond);

static void BM_ModelPredict(benchmark::State& state) {
  const auto spec = ModelSpec::stroke_unit(static_cast<Variant>(state.range(0)));
  const Model m(spec);
  const auto inst = random_instance(spec, 12);
  for (auto _ : state) benchmark::DoNotOptimize(m.predict(inst));
}
BENCHMARK(BM_ModelPredict)
    ->Arg(static_cast<int>(Variant::CNN_DENSE))
    ->Arg(static_cast<int>(Variant::CNN_LSTM))
    ->Arg(static_cast<int>(Variant::CNN_LSTM_SPO2))
    ->Unit(benchmark::kMillisecond);

static void BM_TrainStep(benchmark::State& state) {
  const auto spec = ModelSpec::stroke_unit(Variant::CNN_LSTM_SPO2);
  Model m(spec);
  std::vector<data::WindowInstance> insts;
  for (std::uint64_t i = 0; i < 16; ++i) insts.push_back(random_instance(spec, 20 + i));
  std::vector<const data::WindowInstance*> ptrs;
  for (const auto& i : insts) ptrs.push_back(&i);
  const auto batch = m.make_batch(ptrs);
  const Tensor labels({16, 60}, -1.0);
  for (auto _ : state) {
    m.parameters().zero_grad();
    m.backward(weighted_squared_hinge(m.forward(batch, Mode::train), labels, 3.0));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

static void BM_Auc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto s = randn({n}, 13);
  std::vector<bool> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = s[i] + 0.5 * std::sin(static_cast<double>(i)) > 0.3;
  for (auto _ : state) benchmark::DoNotOptimize(score::auc(s.values(), y));
}
BENCHMARK(BM_Auc)->Arg(3600)->Arg(28800);

BENCHMARK_MAIN();
