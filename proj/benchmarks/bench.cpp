// Microbenchmarks for the hot paths of a training step: dense matmul,
// convolution forward/backward, the correlation proxy, and one full loss
// evaluation with backward pass.
#include <benchmark/benchmark.h>

#include "sitar/datasets.hpp"
#include "sitar/nn.hpp"
#include "sitar/objectives.hpp"
#include "sitar/proxy.hpp"
#include "sitar/rng.hpp"
#include "sitar/tape.hpp"

using namespace sitar;

namespace {

ad::Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t idx) {
  ad::Tensor t(std::move(shape));
  rng::Stream s(42, rng::Purpose::kEval, idx);
  for (auto& v : t.data) v = s.next_uniform(-1, 1);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const ad::Tensor a = random_tensor({n, n}, 0), b = random_tensor({n, n}, 1);
  for (auto _ : state) {
    ad::Tape t;
    auto c = ad::matmul(t.leaf(a), t.leaf(b));
    benchmark::DoNotOptimize(t.value(c).data.data());
  }
}
BENCHMARK(BM_Matmul)->Arg(128)->Arg(512);

void BM_Conv2dForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const ad::Tensor x = random_tensor({batch, 3, 28, 28}, 2);
  const ad::Tensor w = random_tensor({16, 3, 4, 4}, 3);
  const ad::Tensor bias({16});
  for (auto _ : state) {
    ad::Tape t;
    auto y = ad::conv2d(t.leaf(x), t.leaf(w), t.leaf(bias));
    benchmark::DoNotOptimize(t.value(y).data.data());
  }
}
BENCHMARK(BM_Conv2dForward)->Arg(32)->Arg(128);

void BM_Conv2dBackward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const ad::Tensor x = random_tensor({batch, 3, 28, 28}, 4);
  const ad::Tensor w = random_tensor({16, 3, 4, 4}, 5);
  const ad::Tensor bias({16});
  for (auto _ : state) {
    ad::Tape t;
    auto xv = t.leaf(x);
    auto y = ad::conv2d(xv, t.leaf(w), t.leaf(bias));
    t.backward(ad::sum(ad::square(y)));
    benchmark::DoNotOptimize(t.grad(xv).data());
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(32)->Arg(128);

void BM_CorrelationWeights(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const ad::Tensor mu = random_tensor({batch, 10}, 6);
  std::vector<int> y(batch);
  rng::Stream s(7, rng::Purpose::kEval, 7);
  for (auto& l : y) l = static_cast<int>(s.next_below(2));
  for (auto _ : state) {
    auto w = proxy::correlation_weights(mu, y);
    benchmark::DoNotOptimize(w.v.data());
  }
}
BENCHMARK(BM_CorrelationWeights)->Arg(128)->Arg(4096);

void BM_FullTrainStep(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  data::Config dcfg;
  dcfg.seed = 8;
  const auto ds = data::synth_colorshapes(batch, dcfg,
                                          data::SplitKind::kInDistribution);
  std::vector<std::size_t> idx(batch);
  for (std::size_t i = 0; i < batch; ++i) idx[i] = i;
  const ad::Tensor x = ds.batch(idx);
  std::vector<int> y(ds.y.begin(), ds.y.end());

  nn::SitarModel model(3, 28, 28, 10, 2);
  model.init(8);
  obj::LossConfig cfg;
  std::uint64_t step = 0;
  for (auto _ : state) {
    ad::Tape t;
    auto p = nn::bind(t, model.params);
    const auto loss = obj::total_loss(t, model, p, x, y, cfg, 8, step++);
    t.backward(loss.total);
    benchmark::DoNotOptimize(t.grad(p[0]).data());
  }
}
BENCHMARK(BM_FullTrainStep)->Arg(128)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
