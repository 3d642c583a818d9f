#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "../support/toy_data.hpp"
#include "../support/toy_pipeline.hpp"
#include "lorex/explain.hpp"

using namespace lorex;
using lorex::testing::toy_config;
using lorex::testing::toy_dataset;

namespace {

struct Fixture {
  std::shared_ptr<const Dataset> dataset;
  std::shared_ptr<const SelorModel> model;
  std::shared_ptr<const Explainer> explainer;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    auto ds = toy_dataset();
    auto run = run_pipeline(ds, toy_config());
    Fixture x;
    x.dataset = std::make_shared<const Dataset>(std::move(ds));
    x.model = std::make_shared<const SelorModel>(std::move(run.selor));
    x.explainer = std::make_shared<const Explainer>(x.model, x.dataset);
    return x;
  }();
  return f;
}

std::size_t total(const std::vector<std::size_t>& v) { return std::accumulate(v.begin(), v.end(), std::size_t{0}); }

bool contains(const std::vector<int>& v, int a) { return std::find(v.begin(), v.end(), a) != v.end(); }

}  // namespace

TEST_CASE("explanations are locally coherent and report exact coverage") {
  const auto& f = fixture();
  const auto& pool = f.model->pool();
  for (const auto& split : {"train", "test"}) {
    const auto& rows = f.explainer->split_rows(split);
    const auto& ex = f.explainer->baseline(split);
    REQUIRE(ex.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& e = ex[i];
      const auto& x = f.dataset->instances[rows[i]];
      CHECK(e.instance_id == x.id);
      for (int a : e.atom_ids) CHECK(pool.satisfies(a, x));
      CHECK_FALSE(pool.has_conflict(e.atom_ids));
      CHECK(pool.strip_redundant(e.atom_ids) == e.atom_ids);
      CHECK(e.confidence > 0.0);
      CHECK(e.confidence < 1.0);
      CHECK(e.coverage_n == total(lorex::testing::naive_counts(pool, *f.dataset, e.atom_ids)));
      CHECK(e.null_count + std::count_if(e.raw_ids.begin(), e.raw_ids.end(), [](int a) { return a != 0; }) == 4);
      // Served confidence against an independent recomputation.
      auto est = f.model->estimator().predict(e.raw_ids);
      auto sm = smooth(est.p, est.n, f.model->estimator().beta());
      CHECK(std::abs(sm[static_cast<std::size_t>(e.predicted_class)] - e.confidence) < 1e-9);
    }
  }
}

TEST_CASE("explain is deterministic and matches the batched path") {
  const auto& f = fixture();
  const auto& rows = f.dataset->splits.test;
  const auto prior = f.explainer->default_prior();
  for (std::size_t i = 0; i < 10; ++i) {
    auto a = f.explainer->explain(f.dataset->instances[rows[i]], prior);
    auto b = f.explainer->explain(f.dataset->instances[rows[i]], prior);
    CHECK(a.to_json(*f.dataset) == b.to_json(*f.dataset));
    const auto& batched = f.explainer->baseline("test")[i];
    CHECK(a.raw_ids == batched.raw_ids);
    CHECK(std::abs(a.confidence - batched.confidence) < 1e-12);
  }
}

TEST_CASE("an empty explanation carries the smoothed prior") {
  const auto& f = fixture();
  HardPrior none = f.explainer->default_prior();
  none.kinds = {AtomKind::WordExists};  // no such atoms in a tabular pool
  auto e = f.explainer->explain(f.dataset->instances[0], none);
  CHECK(e.atom_ids.empty());
  CHECK(e.null_count == 4);
  CHECK(e.coverage_n == f.dataset->train_size());
  auto prior = f.model->estimator().predict(std::vector<int>{});
  CHECK(e.distribution[1] == doctest::Approx(prior.smoothed[1]).epsilon(1e-12));
}

TEST_CASE("explanation JSON fields") {
  const auto& f = fixture();
  auto j = f.explainer->baseline("test")[0].to_json(*f.dataset);
  for (const char* key : {"instance_id", "atoms", "predicted_class", "confidence", "distribution", "coverage_n",
                          "coverage_pct"})
    CHECK(j.contains(key));
}

TEST_CASE("k-means separates two blobs") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 0.1);
  std::vector<double> pts;
  for (int i = 0; i < 100; ++i) {
    const double c = i < 50 ? -5.0 : 5.0;
    pts.push_back(c + g(rng));
    pts.push_back(c + g(rng));
  }
  auto a = kmeans(pts, 2, 2, 3);
  for (int i = 1; i < 50; ++i) CHECK(a[i] == a[0]);
  for (int i = 51; i < 100; ++i) CHECK(a[i] == a[50]);
  CHECK(a[0] != a[50]);
  auto one = kmeans(pts, 2, 1, 3);
  CHECK(std::all_of(one.begin(), one.end(), [](int c) { return c == 0; }));
  CHECK_THROWS_AS(kmeans(pts, 2, 101, 3), std::invalid_argument);
  CHECK_THROWS_AS(kmeans(pts, 2, 0, 3), std::invalid_argument);
}

TEST_CASE("cluster report columns and consistency") {
  const auto& f = fixture();
  const auto& ex = f.explainer->baseline("train");
  const auto& gen = f.model->generator();
  const auto emb = gen.atom_embeddings().data();
  for (std::size_t k : {1u, 3u, 10u}) {
    auto r = cluster_explanations(ex, *f.dataset, f.model->pool(), emb, gen.config().hidden, k, 0);
    REQUIRE(r.clusters.size() == k);
    std::size_t members = 0;
    double pct = 0;
    for (const auto& c : r.clusters) {
      members += c.members;
      pct += c.percent;
      CHECK_FALSE(c.mean_length.has_value());
    }
    CHECK(members == ex.size());
    CHECK(std::abs(pct - 100.0) <= 0.1);
    if (k == 1) {
      std::size_t ok = 0;
      const auto& rows = f.dataset->splits.train;
      for (std::size_t i = 0; i < rows.size(); ++i) ok += ex[i].predicted_class == f.dataset->instances[rows[i]].label;
      CHECK(r.clusters[0].accuracy == doctest::Approx(static_cast<double>(ok) / static_cast<double>(rows.size())));
    }
    auto j = r.to_json(f.model->pool(), *f.dataset);
    for (const char* key : {"accuracy", "label", "label_ratio", "num", "percent", "atoms"})
      CHECK(j["clusters"][0].contains(key));
    CHECK(r.table(f.model->pool(), *f.dataset).rfind("Cluster | Acc | Label | Num | Atoms", 0) == 0);
  }
  CHECK_THROWS_AS(cluster_explanations(ex, *f.dataset, f.model->pool(), emb, gen.config().hidden, 0, 0),
                  std::invalid_argument);
}

TEST_CASE("text cluster reports carry a length column") {
  lorex::testing::TempDir dir("explain");
  auto ds = load_dataset(DatasetConfig::load(lorex::testing::test_data_dir() / "reviews.json"), 0);
  auto pool = AtomPool::build(ds);
  std::vector<Explanation> ex;
  for (std::size_t i = 0; i < 20; ++i) {
    Explanation e;
    e.instance_id = ds.train(i).id;
    e.predicted_class = ds.train(i).label;
    ex.push_back(e);
  }
  std::vector<double> emb(pool.size() * 2, 0.0);
  auto r = cluster_explanations(ex, ds, pool, emb, 2, 2, 0);
  double len = 0;
  for (std::size_t i = 0; i < 20; ++i) len += ds.train(i).length;
  double weighted = 0;
  for (const auto& c : r.clusters) {
    REQUIRE(c.mean_length.has_value());
    weighted += *c.mean_length * static_cast<double>(c.members);
  }
  CHECK(weighted == doctest::Approx(len));
  CHECK(r.table(pool, ds).find("| Len |") != std::string::npos);
}

TEST_CASE("excluding the planted spurious atom recovers the true rule") {
  const auto& f = fixture();
  const auto& pool = f.model->pool();
  const auto before_hash = f.model->fingerprint();
  const int spurious = *pool.find("marker == on");
  const int red = *pool.find("color == red"), square = *pool.find("shape == square");
  SteeringSession s(f.explainer);
  auto r = s.exclude({spurious});
  REQUIRE(r.affected > 0);
  std::size_t recovered = 0;
  for (const auto& d : r.instances) {
    CHECK(contains(d.before.raw_ids, spurious));
    CHECK_FALSE(contains(d.after.raw_ids, spurious));
    recovered += contains(d.after.atom_ids, red) && contains(d.after.atom_ids, square);
  }
  CHECK(static_cast<double>(recovered) >= 0.9 * static_cast<double>(r.affected));
  CHECK(f.model->fingerprint() == before_hash);
  for (std::size_t i = 0; i < f.dataset->splits.test.size(); ++i)
    CHECK_FALSE(contains(s.current("test", i).raw_ids, spurious));
  CHECK_FALSE(r.replacements.empty());
  auto j = r.to_json(pool, *f.dataset);
  CHECK(j["affected"] == r.affected);
  CHECK(j["splits"].size() == 2);
}

TEST_CASE("excluding an unused atom affects nothing") {
  const auto& f = fixture();
  std::set<int> used;
  for (const auto& split : {"train", "test"})
    for (const auto& e : f.explainer->baseline(split)) used.insert(e.raw_ids.begin(), e.raw_ids.end());
  int unused = -1;
  for (int a = 1; a < static_cast<int>(f.model->pool().size()); ++a)
    if (!used.contains(a)) unused = a;
  REQUIRE(unused > 0);
  SteeringSession s(f.explainer);
  auto r = s.exclude({unused});
  CHECK(r.affected == 0);
  CHECK(r.instances.empty());
  CHECK(r.replacements.empty());
}

TEST_CASE("reset restores the original explanations") {
  const auto& f = fixture();
  SteeringSession s(f.explainer);
  const auto& base = f.explainer->baseline("test");
  s.reset();
  CHECK(s.excluded().empty());
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(&s.current("test", i) == &base[i]);
  s.exclude({*f.model->pool().find("marker == on"), *f.model->pool().find("shape == square")});
  CHECK(s.excluded().size() == 2);
  s.reset();
  CHECK(s.excluded().empty());
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(s.current("test", i).to_json(*f.dataset).dump() == base[i].to_json(*f.dataset).dump());
  const auto& x = f.dataset->instances[f.dataset->splits.test[0]];
  CHECK(s.explain(x).to_json(*f.dataset) == base[0].to_json(*f.dataset));
}

TEST_CASE("steering rejects NULL and unknown atoms; sessions are isolated") {
  const auto& f = fixture();
  SteeringSession a(f.explainer), b(f.explainer);
  CHECK_THROWS_AS(a.exclude({kNullAtom}), std::invalid_argument);
  CHECK_THROWS_AS(a.exclude({static_cast<int>(f.model->pool().size())}), std::out_of_range);
  CHECK(a.excluded().empty());
  const int spurious = *f.model->pool().find("marker == on");
  a.exclude({spurious});
  CHECK(b.excluded().empty());
  bool b_uses = false;
  for (std::size_t i = 0; i < f.dataset->splits.test.size(); ++i) b_uses = b_uses || contains(b.current("test", i).raw_ids, spurious);
  CHECK(b_uses);
}
