#include <doctest.h>

#include <algorithm>
#include <random>

#include "../support/fixtures.hpp"
#include "lorex/atoms.hpp"

using namespace lorex;
using lorex::testing::TempDir;

namespace {

const Dataset& adult() {
  static const Dataset ds = load_dataset(DatasetConfig::load(lorex::testing::data_dir() / "adult.json"), 0);
  return ds;
}

Dataset tiny_tabular(const TempDir& dir, const std::string& csv) {
  TabularConfig c;
  c.path = dir.write("t.csv", csv);
  c.label = "y";
  c.numeric = {"age"};
  c.categorical = {"city"};
  return load_tabular(c, {1.0, 0.0}, 0);
}

}  // namespace

TEST_CASE("adult age yields six threshold atoms") {
  auto pool = AtomPool::build(adult());
  for (const char* d : {"age ≥ 28", "age < 28", "age ≥ 37", "age < 37", "age ≥ 48", "age < 48"})
    CHECK_MESSAGE(pool.find(d).has_value(), d);
  const auto age = adult().feature_index("age");
  CHECK(pool.feature_atoms(age).size() == 6);
  CHECK(pool[0].kind == AtomKind::Null);
  CHECK(pool[0].display == "NULL");
}

TEST_CASE("married adult satisfies the marital-status atom") {
  const auto& ds = adult();
  auto pool = AtomPool::build(ds);
  const int married = *pool.find("marital-status == Married");
  auto x = instance_from_json(ds, {{"age", 50}, {"workclass", "Private"}, {"fnlwgt", 1000}, {"education", "Bachelors"},
                                   {"education-num", 13}, {"marital-status", "Married"}, {"occupation", "Sales"},
                                   {"relationship", "Husband"}, {"race", "White"}, {"sex", "Male"},
                                   {"capital-gain", 0}, {"capital-loss", 0}, {"hours-per-week", 40},
                                   {"native-country", "United-States"}});
  CHECK(pool.satisfies(married, x));
  CHECK(pool.satisfies(kNullAtom, x));
  CHECK_FALSE(pool.satisfies(*pool.find("marital-status == Never-married"), x));
  x.values[static_cast<std::size_t>(ds.feature_index("age"))] = 37;
  CHECK_FALSE(pool.satisfies(*pool.find("age ≥ 48"), x));
  CHECK(pool.satisfies(*pool.find("age ≥ 37"), x));
  Instance wrong;
  wrong.values = {1.0};
  CHECK_THROWS_AS(pool.satisfies(married, wrong), DataError);
}

TEST_CASE("atom coverage equals a per-instance count") {
  const auto& ds = adult();
  auto pool = AtomPool::build(ds);
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(1, static_cast<int>(pool.size()) - 1);
  for (int t = 0; t < 10; ++t) {
    const int a = pick(rng);
    std::size_t n = 0;
    for (auto i : ds.splits.train) n += pool.satisfies(a, ds.instances[i]);
    CHECK(pool[a].coverage == n);
  }
  CHECK(pool[0].coverage == ds.train_size());
}

TEST_CASE("display strings round-trip through the pool") {
  auto pool = AtomPool::build(adult());
  for (const auto& a : pool.atoms()) CHECK(pool.find(a.display) == a.id);
  auto again = AtomPool::from_json(pool.to_json(), adult());
  REQUIRE(again.size() == pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(again.atoms()[i].display == pool.atoms()[i].display);
    CHECK(again.atoms()[i].threshold == pool.atoms()[i].threshold);
  }
  CHECK(again.to_json() == pool.to_json());
}

TEST_CASE("text pool has one word atom per vocabulary word plus NULL") {
  TempDir dir("atoms");
  std::string corpus;
  for (int d = 0; d < 6000; ++d)
    corpus += "{\"text\": \"w" + std::to_string(d) + " common\", \"label\": \"" + (d % 2 ? "a" : "b") + "\"}\n";
  TextConfig cfg{dir.write("c.jsonl", corpus), 5000, {}, {}};
  auto ds = load_text(cfg, {1.0, 0.0}, 0);
  auto pool = AtomPool::build(ds, {5000});
  CHECK(pool.size() == 5001);
  CHECK(pool[1].display == "common");
}

TEST_CASE("word atoms test for existence") {
  TempDir dir("atoms");
  std::string corpus = "{\"text\": \"awesome awesome food\", \"label\": \"pos\"}\n"
                       "{\"text\": \"bland food\", \"label\": \"neg\"}\n";
  auto ds = load_text({dir.write("c.jsonl", corpus), 50, {}, {}}, {1.0, 0.0}, 0);
  auto pool = AtomPool::build(ds);
  const int awesome = *pool.find("awesome");
  const auto& doc = ds.instances[0].tokens.size() == 2 ? ds.instances[0] : ds.instances[1];
  CHECK(pool.satisfies(awesome, doc));
  CHECK(pool[awesome].coverage == 1);
  CHECK(pool[*pool.find("food")].coverage == 2);
}

TEST_CASE("embedding initialisation averages satisfying instances") {
  TempDir dir("atoms");
  auto ds = tiny_tabular(dir, "age,city,y\n10,paris,a\n20,rome,b\n30,rome,a\n40,oslo,b\n");
  auto pool = AtomPool::build(ds);
  std::vector<double> reps(ds.train_size() * 2);
  for (std::size_t j = 0; j < ds.train_size(); ++j) {
    const auto& x = ds.train(j);
    const double v = x.values[0];
    // rome rows get v and -v so that their mean vanishes.
    reps[j * 2] = v == 20 ? 1.0 : v == 30 ? -1.0 : v;
    reps[j * 2 + 1] = v == 20 ? 2.0 : v == 30 ? -2.0 : 0.5;
  }
  pool.init_embeddings(ds, reps, 2);
  auto emb = [&](const std::string& d) {
    const auto a = static_cast<std::size_t>(*pool.find(d));
    return std::vector<double>{pool.embeddings()[a * 2], pool.embeddings()[a * 2 + 1]};
  };
  CHECK(emb("city == paris") == std::vector<double>{10.0, 0.5});
  CHECK(emb("city == rome") == std::vector<double>{0.0, 0.0});
  CHECK(emb("NULL") == std::vector<double>{0.0, 0.0});
  CHECK_THROWS_AS(pool.init_embeddings(ds, reps, 3), DataError);
}

TEST_CASE("strip_redundant keeps the tightest bound per direction") {
  auto pool = AtomPool::build(adult());
  auto id = [&](const char* d) { return *pool.find(d); };
  std::vector<int> a = {id("age ≥ 37"), id("age ≥ 48")};
  CHECK(pool.strip_redundant(a) == std::vector<int>{id("age ≥ 48")});
  std::vector<int> b = {id("age ≥ 28"), id("age < 48")};
  CHECK(pool.strip_redundant(b) == b);
  std::vector<int> c = {id("sex == Male"), id("age < 48"), id("age < 28"), id("age ≥ 28")};
  CHECK(pool.strip_redundant(c) == std::vector<int>{id("sex == Male"), id("age < 28"), id("age ≥ 28")});
  CHECK(pool.has_conflict(std::vector<int>{id("age ≥ 48"), id("age < 37")}));
  CHECK_FALSE(pool.has_conflict(b));
}

TEST_CASE("word atoms are never redundant") {
  TempDir dir("atoms");
  auto ds = load_text({dir.write("c.jsonl", "{\"text\": \"good tasty\", \"label\": \"p\"}\n{\"text\": \"x\", \"label\": \"n\"}\n"),
                       50, {}, {}},
                      {1.0, 0.0}, 0);
  auto pool = AtomPool::build(ds);
  std::vector<int> ids = {*pool.find("good"), *pool.find("tasty")};
  CHECK(pool.strip_redundant(ids) == ids);
}

TEST_CASE("strip_redundant is idempotent and never grows") {
  const auto& ds = adult();
  auto pool = AtomPool::build(ds);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<std::size_t> row(0, ds.instances.size() - 1);
  for (int t = 0; t < 500; ++t) {
    auto sat = pool.satisfied(ds.instances[row(rng)]);
    std::shuffle(sat.begin(), sat.end(), rng);
    sat.resize(std::min<std::size_t>(sat.size(), 6));
    auto once = pool.strip_redundant(sat);
    CHECK(once.size() <= sat.size());
    CHECK(pool.strip_redundant(once) == once);
    CHECK_FALSE(pool.has_conflict(sat));
  }
}

TEST_CASE("atom search is case-insensitive and skips NULL") {
  auto pool = AtomPool::build(adult());
  auto hits = pool.search("MARITAL");
  CHECK_FALSE(hits.empty());
  for (int a : hits) CHECK(pool[a].display.find("marital") == 0);
  CHECK(pool.search("null").empty());
}
