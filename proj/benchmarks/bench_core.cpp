// Micro-benchmarks of the hot paths: dense products, attention, model
// encoding, shift prediction and full-vocabulary ranking.

#include <benchmark/benchmark.h>

#include "kgedit/editors.hpp"
#include "kgedit/kgdata.hpp"
#include "kgedit/kgemodel.hpp"

using namespace kgedit;
using ad::Tensor;

namespace {

model::ModelConfig bench_config(std::size_t entities, std::size_t relations) {
  model::ModelConfig c;
  c.entity_vocab_size = entities;
  c.relation_vocab_size = relations;
  return c;  // d_model 64, 2 layers, 4 heads, d_ff 256
}

std::vector<kg::QueryKey> keys_for(std::size_t n, std::size_t entities, std::size_t relations) {
  Rng rng(3);
  std::vector<kg::QueryKey> keys;
  for (std::size_t i = 0; i < n; ++i) {
    keys.push_back({rng.below(2) ? kg::Direction::tail_query : kg::Direction::head_query,
                    static_cast<kg::EntityId>(rng.below(entities)), static_cast<kg::RelationId>(rng.below(relations))});
  }
  return keys;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = ad::constant(Tensor::normal({n, n}, rng, 1.0));
  const auto b = ad::constant(Tensor::normal({n, n}, rng, 1.0));
  for (auto _ : state) benchmark::DoNotOptimize(ad::matmul(a, b).value()[0]);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  auto a = ad::parameter(Tensor::normal({n, n}, rng, 1.0));
  auto b = ad::parameter(Tensor::normal({n, n}, rng, 1.0));
  for (auto _ : state) {
    ad::backward(ad::sum(ad::matmul(a, b)));
    a.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

static void BM_Attention(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  const std::size_t seq = 16, d = 64, heads = 4;
  Rng rng(4);
  const auto q = ad::constant(Tensor::normal({batch * seq, d}, rng, 1.0));
  const auto k = ad::constant(Tensor::normal({batch * seq, d}, rng, 1.0));
  const auto v = ad::constant(Tensor::normal({batch * seq, d}, rng, 1.0));
  std::vector<std::size_t> lengths(batch, 6);
  for (auto _ : state) benchmark::DoNotOptimize(ad::attention(q, k, v, batch, seq, heads, lengths).value()[0]);
}
BENCHMARK(BM_Attention)->Arg(1)->Arg(32);

static void BM_EntityLogits(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  model::BaseModel m(bench_config(200, 12));
  m.freeze();
  const auto keys = keys_for(batch, 200, 12);
  for (auto _ : state) benchmark::DoNotOptimize(m.entity_logits(keys).value()[0]);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_EntityLogits)->Arg(1)->Arg(32)->Arg(256);

static void BM_TrainStep(benchmark::State& state) {
  model::BaseModel m(bench_config(200, 12));
  const auto keys = keys_for(32, 200, 12);
  std::vector<std::size_t> targets(32);
  for (std::size_t i = 0; i < 32; ++i) targets[i] = i % 200;
  for (auto _ : state) {
    ad::backward(ad::cross_entropy(m.entity_logits(keys), targets));
    for (auto& p : m.params()) p.zero_grad();
  }
}
BENCHMARK(BM_TrainStep);

static void BM_PredictShift(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  edit::EditorConfig config;
  edit::HyperNetwork hn(200, 12, {{"up", 64, width}, {"down", width, 64}}, config);
  Rng rng(5);
  const Tensor h = Tensor::normal({1, hn.cond_dim()}, rng, 1.0);
  const std::vector<Tensor> grads{Tensor::normal({64, width}, rng, 1.0), Tensor::normal({width, 64}, rng, 1.0)};
  for (auto _ : state) benchmark::DoNotOptimize(edit::predict_shift(hn, h, grads).deltas[0][0]);
}
BENCHMARK(BM_PredictShift)->Arg(64)->Arg(255);

static void BM_KgEditorApply(benchmark::State& state) {
  auto m = std::make_shared<model::BaseModel>(bench_config(200, 12));
  m->freeze();
  edit::KgEditor editor(m, edit::EditorConfig{});
  const std::vector<kg::EditRequest> group{{kg::Direction::tail_query, 3, 1, 7, 9}};
  const auto keys = keys_for(64, 200, 12);
  for (auto _ : state) {
    const auto applied = editor.apply(group);
    benchmark::DoNotOptimize(applied->score(keys)[0]);
  }
}
BENCHMARK(BM_KgEditorApply);

static void BM_RankProbes(benchmark::State& state) {
  auto m = std::make_shared<model::BaseModel>(bench_config(200, 12));
  m->freeze();
  const model::ModelScorer scorer(m);
  const auto graph = kg::synthesize_graph({200, 12, 3000, 7});
  const auto probes = kg::all_probes(graph);
  const std::span<const kg::Probe> some(probes.data(), 512);
  for (auto _ : state) benchmark::DoNotOptimize(kg::rank_probes(scorer, some).back());
  state.SetItemsProcessed(state.iterations() * 512);
}
BENCHMARK(BM_RankProbes);

static void BM_RankOf(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  std::vector<double> scores(n);
  for (auto& s : scores) s = rng.normal(0.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(kg::rank_of(scores, static_cast<kg::EntityId>(n / 2)));
}
BENCHMARK(BM_RankOf)->Arg(200)->Arg(15000);

BENCHMARK_MAIN();
