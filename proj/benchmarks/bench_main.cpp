#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "cln/bench.hpp"
#include "cln/numcore.hpp"
#include "cln/optim.hpp"
#include "cln/random.hpp"
#include "cln/runtime.hpp"
#include "cln/trainer.hpp"

using namespace cln;

namespace {

std::vector<double> random_images(const BackboneConfig& cfg, std::size_t batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(batch * cfg.image_values());
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  return v;
}

std::shared_ptr<const Backbone> desk_backbone() {
  static const auto b = [] {
    auto bb = std::make_shared<Backbone>(Backbone::initialize(BackboneConfig{}, 1));
    bb->freeze();
    return std::shared_ptr<const Backbone>(bb);
  }();
  return b;
}

// Desk model with 10 tasks of 5 classes, untrained but fully allocated.
std::shared_ptr<ContinualModel> desk_model(Variant v) {
  auto m = std::make_shared<ContinualModel>(desk_backbone(), v, 0);
  for (std::uint32_t t = 0; t < 10; ++t) {
    std::vector<std::uint32_t> classes;
    for (std::uint32_t c = 0; c < 5; ++c) classes.push_back(t * 5 + c);
    m->add_task(classes);
    m->mark_phase1_done(t);
  }
  m->set_trainable(std::nullopt);
  return m;
}

void BM_ForwardBase(benchmark::State& state) {
  const auto bb = desk_backbone();
  const std::size_t batch = state.range(0);
  const auto images = random_images(bb->config(), batch, 3);
  for (auto _ : state) {
    Graph g;
    BaseLnProvider p(*bb);
    benchmark::DoNotOptimize(g.value(bb->forward(g, images, batch, p).cls_embedding).data());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_ForwardBase)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ForwardBackwardTask(benchmark::State& state) {
  auto model = desk_model(Variant::kTwoStage);
  model->set_trainable(0);
  const std::size_t batch = state.range(0);
  const auto images = random_images(model->backbone().config(), batch, 4);
  for (auto _ : state) {
    Graph g;
    TaskLnProvider p(model->bank(), 0);
    const auto r = model->backbone().forward(g, images, batch, p);
    g.backward(g.sum(r.cls_embedding));
    for (Tensor* t : model->bank().task_parameters(0)) t->zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_ForwardBackwardTask)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_Infer(benchmark::State& state) {
  const auto model = desk_model(state.range(0) ? Variant::kSingleStage : Variant::kTwoStage);
  const std::size_t batch = 32;
  const auto images = random_images(model->backbone().config(), batch, 5);
  for (auto _ : state) benchmark::DoNotOptimize(infer_batch(*model, images, batch, InferMode::kNormal));
  state.SetItemsProcessed(state.iterations() * batch);
  state.SetLabel(state.range(0) ? "single-stage" : "two-stage");
}
BENCHMARK(BM_Infer)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_SelectTwoStage(benchmark::State& state) {
  GlobalKeyBank keys(64);
  for (std::uint64_t t = 0; t < static_cast<std::uint64_t>(state.range(0)); ++t) keys.add_key(t);
  Rng rng(9);
  std::vector<double> e(64);
  for (auto& x : e) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(select_two_stage(e, keys));
}
BENCHMARK(BM_SelectTwoStage)->Arg(10)->Arg(100);

void BM_LayerNormalize(benchmark::State& state) {
  Rng rng(2);
  std::vector<double> z(state.range(0));
  for (auto& x : z) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(layer_normalize(z));
}
BENCHMARK(BM_LayerNormalize)->Arg(64)->Arg(768);

void BM_AdamStep(benchmark::State& state) {
  Tensor p({static_cast<std::size_t>(state.range(0))}, 0.5);
  const std::vector<double> g(state.range(0), 0.01);
  AdamState s;
  for (auto _ : state) adam_step(p, g, s, AdamConfig{});
}
BENCHMARK(BM_AdamStep)->Arg(4096);

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
