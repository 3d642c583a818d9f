#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "../support/toy_data.hpp"
#include "lorex/coverage.hpp"

using namespace lorex;
using lorex::testing::naive_counts;
using lorex::testing::random_tabular;
using lorex::testing::TempDir;

namespace {

std::size_t total(const std::vector<std::size_t>& v) { return std::accumulate(v.begin(), v.end(), std::size_t{0}); }

Dataset adult() { return load_dataset(DatasetConfig::load(lorex::testing::data_dir() / "adult.json"), 0); }

}  // namespace

TEST_CASE("three-instance true matrix rows") {
  TempDir dir("cov");
  TabularConfig c;
  c.path = dir.write("t.csv", "c,y\nx,a\nz,b\nx,b\n");
  c.label = "y";
  c.categorical = {"c"};
  // No shuffle ambiguity: check bits against satisfies directly.
  auto ds = load_tabular(c, {1.0, 0.0}, 0);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  const int x = *pool.find("c == x");
  for (std::size_t j = 0; j < 3; ++j) CHECK(tm.bit(x, j) == (ds.train(j).values[0] == 0));
  CHECK(tm.popcount(x) == 2);
  CHECK(tm.popcount(kNullAtom) == 3);
  CHECK(tm.row(kNullAtom)[0] == 0b111);
}

TEST_CASE("row popcounts match the per-instance loop") {
  auto ds = adult();
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  CHECK(tm.popcount(kNullAtom) == ds.train_size());
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> pick(1, static_cast<int>(pool.size()) - 1);
  for (int t = 0; t < 20; ++t) {
    const int a = pick(rng);
    std::vector<int> ids = {a};
    CHECK(tm.popcount(a) == total(naive_counts(pool, ds, ids)));
  }
}

TEST_CASE("empirical consequent of a 90% rule") {
  TempDir dir("cov");
  std::string csv = "c,y\n";
  for (int i = 0; i < 9; ++i) csv += "hit,pos\n";
  csv += "hit,neg\n";
  for (int i = 0; i < 10; ++i) csv += "miss,neg\n";
  TabularConfig c;
  c.path = dir.write("p.csv", csv);
  c.label = "y";
  c.categorical = {"c"};
  c.classes = {"neg", "pos"};
  auto ds = load_tabular(c, {1.0, 0.0}, 0);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  std::vector<int> rule = {*pool.find("c == hit")};
  auto s = tm.coverage(rule);
  CHECK(s.n == 10);
  CHECK(s.p_hat[1] == doctest::Approx(0.9));
  CHECK(s.argmax() == 1);

  std::vector<int> null_only = {kNullAtom};
  auto all = tm.coverage(null_only);
  CHECK(all.n == 20);
  CHECK(all.p_hat == ds.train_prior());
  CHECK(tm.coverage(std::vector<int>{}).n == 20);
}

TEST_CASE("coverage agrees with the naive oracle on random length-3 rules") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 200, 17, 3);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(pool.size()) - 1);
  for (int t = 0; t < 2000; ++t) {
    std::vector<int> ids = {pick(rng), pick(rng), pick(rng)};
    auto s = tm.coverage(ids);
    auto oracle = naive_counts(pool, ds, ids);
    CHECK(s.n_y == oracle);
    CHECK(s.n == total(oracle));
    CHECK(tm.count(ids) == s.n);
  }
}

TEST_CASE("coverage is invariant under permutation and duplication") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 120, 3);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> pick(1, static_cast<int>(pool.size()) - 1);
  for (int t = 0; t < 300; ++t) {
    std::vector<int> ids = {pick(rng), pick(rng), pick(rng)};
    auto base = tm.coverage(ids);
    auto shuffled = ids;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    shuffled.push_back(ids[0]);
    shuffled.push_back(kNullAtom);
    auto other = tm.coverage(shuffled);
    CHECK(other.n_y == base.n_y);
  }
  CHECK_THROWS_AS(tm.coverage(std::vector<int>{static_cast<int>(pool.size())}), DataError);
}

TEST_CASE("sampler with min_df 1 enumerates every covered pair") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 5, 23);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  SamplerConfig cfg{.min_df = 1, .per_length = 100000, .k = 1, .max_len = 3, .seed = 1};
  auto rules = sample_rules(tm, cfg);

  std::set<std::vector<int>> pairs, triples;
  const int m = static_cast<int>(pool.size());
  for (int a = 1; a < m; ++a)
    for (int b = a + 1; b < m; ++b) {
      std::vector<int> ab = {a, b};
      if (total(naive_counts(pool, ds, ab)) >= 1) pairs.insert(ab);
      for (int c = b + 1; c < m; ++c) {
        std::vector<int> abc = {a, b, c};
        if (total(naive_counts(pool, ds, abc)) >= 1) triples.insert(abc);
      }
    }
  std::set<std::vector<int>> got2, got3;
  for (const auto& r : rules.by_length[1]) got2.insert(r.atoms);
  for (const auto& r : rules.by_length[2]) got3.insert(r.atoms);
  CHECK(got2 == pairs);
  CHECK(got3 == triples);
  CHECK(rules.survivors[1] == pairs.size());
}

TEST_CASE("sampled rules respect min_df and the per-length cap") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 400, 31);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  SamplerConfig cfg{.min_df = 10, .per_length = 50, .k = 3, .max_len = 4, .seed = 9};
  auto rules = sample_rules(tm, cfg);
  REQUIRE(rules.by_length.size() == 4);
  for (std::size_t l = 0; l < 4; ++l) {
    CHECK(rules.by_length[l].size() <= 50);
    for (const auto& r : rules.by_length[l]) {
      CHECK(r.atoms.size() == l + 1);
      CHECK(tm.coverage(r.atoms).n >= 10);
      CHECK(r.stats.n == tm.coverage(r.atoms).n);
      CHECK(canonical(r.atoms) == r.atoms);
    }
  }
  auto again = sample_rules(tm, cfg);
  for (std::size_t l = 0; l < 4; ++l) {
    REQUIRE(again.by_length[l].size() == rules.by_length[l].size());
    for (std::size_t i = 0; i < rules.by_length[l].size(); ++i) CHECK(again.by_length[l][i].atoms == rules.by_length[l][i].atoms);
  }
}

TEST_CASE("raising min_df never increases survivors") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 300, 41);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  std::vector<std::size_t> prev;
  for (std::size_t min_df : {1, 5, 20, 60}) {
    auto rules = sample_rules(tm, {.min_df = min_df, .per_length = 1000000, .k = 1, .max_len = 3, .seed = 0});
    if (!prev.empty())
      for (std::size_t l = 0; l < 3; ++l) CHECK(rules.survivors[l] <= prev[l]);
    prev = rules.survivors;
  }
}

TEST_CASE("too few survivors produces a warning, not an error") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 30, 2);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  auto rules = sample_rules(tm, {.min_df = 5, .per_length = 10000, .k = 2, .max_len = 4, .seed = 0});
  CHECK_FALSE(rules.warnings.empty());
  CHECK_THROWS_AS(sample_rules(tm, {.min_df = 0}), DataError);
}

TEST_CASE("stratified subsample alternates classes round-robin") {
  std::vector<SampledRule> rules;
  for (int i = 0; i < 10; ++i) {
    SampledRule r;
    r.atoms = {i + 1};
    r.stats.n = 10;
    const bool pos = i < 2;
    r.stats.p_hat = pos ? std::vector<double>{0.2, 0.8} : std::vector<double>{0.7, 0.3};
    rules.push_back(r);
  }
  auto out = stratified_subsample(rules, 4, 2, 1);
  REQUIRE(out.size() == 4);
  CHECK(out[0].stats.argmax() == 0);
  CHECK(out[1].stats.argmax() == 1);
  CHECK(out[2].stats.argmax() == 0);
  CHECK(out[3].stats.argmax() == 1);
  auto small = stratified_subsample(rules, 6, 2, 1);
  CHECK(std::count_if(small.begin(), small.end(), [](const auto& r) { return r.stats.argmax() == 1; }) == 2);
}

TEST_CASE("rule JSON-Lines round trip") {
  TempDir dir("cov");
  auto ds = random_tabular(dir, 100, 6);
  auto pool = AtomPool::build(ds);
  auto tm = TrueMatrix::build(pool, ds);
  auto rules = sample_rules(tm, {.min_df = 5, .per_length = 20, .k = 2, .max_len = 2, .seed = 3});
  auto path = dir.path() / "rules.jsonl";
  write_rules_jsonl(path, rules);
  auto back = read_rules_jsonl(path);
  auto flat = rules.flatten();
  REQUIRE(back.size() == flat.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].atoms == flat[i].atoms);
    CHECK(back[i].stats.n_y == flat[i].stats.n_y);
    CHECK(back[i].stats.p_hat == flat[i].stats.p_hat);
  }
}
