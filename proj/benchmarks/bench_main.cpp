#include <benchmark/benchmark.h>

#include <random>

#include "lorex/coverage.hpp"
#include "lorex/diff/graph.hpp"
#include "lorex/diff/ops.hpp"
#include "lorex/explain.hpp"
#include "lorex/trainer.hpp"

namespace {

using namespace lorex;

const std::filesystem::path kData = std::filesystem::path(LOREX_SOURCE_DIR) / "data";

struct Adult {
  Dataset dataset;
  AtomPool pool;
  TrueMatrix matrix;
};

const Adult& adult() {
  static const Adult a = [] {
    Adult x{load_dataset(DatasetConfig::load(kData / "adult.json"), 0), {}, {}};
    x.pool = AtomPool::build(x.dataset);
    x.matrix = TrueMatrix::build(x.pool, x.dataset);
    return x;
  }();
  return a;
}

std::vector<std::vector<int>> random_antecedents(std::size_t count, std::size_t len, std::uint64_t seed) {
  const auto& a = adult();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> atom(1, static_cast<int>(a.pool.size()) - 1);
  std::vector<std::vector<int>> out(count);
  for (auto& r : out)
    for (std::size_t i = 0; i < len; ++i) r.push_back(atom(rng));
  return out;
}

void BM_TrueMatrixBuild(benchmark::State& state) {
  const auto& a = adult();
  for (auto _ : state) benchmark::DoNotOptimize(TrueMatrix::build(a.pool, a.dataset));
  state.counters["instances"] = static_cast<double>(a.dataset.train_size());
  state.counters["atoms"] = static_cast<double>(a.pool.size());
}
BENCHMARK(BM_TrueMatrixBuild)->Unit(benchmark::kMillisecond);

// Length-4 n_alpha queries; the throughput target is 1e5 per second.
void BM_CoverageCount(benchmark::State& state) {
  const auto& a = adult();
  const auto queries = random_antecedents(4096, static_cast<std::size_t>(state.range(0)), 1);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(a.matrix.count(queries[i++ & 4095]));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()));
}
BENCHMARK(BM_CoverageCount)->Arg(1)->Arg(2)->Arg(4);

void BM_CoverageStats(benchmark::State& state) {
  const auto& a = adult();
  const auto queries = random_antecedents(4096, 4, 2);
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(a.matrix.coverage(queries[i++ & 4095]));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()));
}
BENCHMARK(BM_CoverageStats);

void BM_SampleRules(benchmark::State& state) {
  const auto& a = adult();
  SamplerConfig c;
  c.per_length = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(sample_rules(a.matrix, c));
}
BENCHMARK(BM_SampleRules)->Arg(1000)->Unit(benchmark::kMillisecond)->Iterations(1);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<double> av(16 * n), bv(n * n);
  for (auto& v : av) v = g(rng);
  for (auto& v : bv) v = g(rng);
  auto a = diff::Tensor::parameter({16, n}, av);
  auto b = diff::Tensor::parameter({n, n}, bv);
  for (auto _ : state) {
    auto y = diff::sum(diff::matmul(a, b));
    diff::backward(y);
    benchmark::DoNotOptimize(a.grad().data());
  }
}
BENCHMARK(BM_Matmul)->Arg(128)->Arg(512)->Unit(benchmark::kMicrosecond);

struct Toy {
  std::shared_ptr<const Dataset> dataset;
  std::shared_ptr<const Explainer> explainer;
};

const Toy& toy() {
  static const Toy t = [] {
    auto ds = load_dataset(DatasetConfig::load(kData / "toy.json"), 0);
    PipelineConfig c;
    c.train.hidden = 32;
    c.train.epochs = 5;
    c.train.lr = 3e-3;
    c.sampler.min_df = 5;
    c.sampler.per_length = 300;
    c.sampler.k = 20;
    c.pretrain.epochs = 5;
    c.pretrain.lr = 3e-3;
    c.estimator_ffn = 32;
    c.estimator_mlp = 32;
    auto run = run_pipeline(ds, c);
    Toy x;
    x.dataset = std::make_shared<const Dataset>(std::move(ds));
    auto model = std::make_shared<const SelorModel>(std::move(run.selor));
    x.explainer = std::make_shared<const Explainer>(model, x.dataset);
    return x;
  }();
  return t;
}

void BM_ExplainOne(benchmark::State& state) {
  const auto& t = toy();
  const auto prior = t.explainer->default_prior();
  const auto& x = t.dataset->instances[t.dataset->splits.test[0]];
  for (auto _ : state) benchmark::DoNotOptimize(t.explainer->explain(x, prior));
}
BENCHMARK(BM_ExplainOne)->Unit(benchmark::kMicrosecond);

}  // namespace
BENCHMARK_MAIN();
