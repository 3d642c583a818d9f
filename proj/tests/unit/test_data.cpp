#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "../support/fixtures.hpp"
#include "lorex/data.hpp"

using namespace lorex;
using lorex::testing::TempDir;

namespace {

std::string ten_row_csv() {
  std::string s = "x,kind,y\n";
  for (int i = 0; i < 10; ++i) s += std::to_string(i) + "," + (i % 2 ? "odd" : "even") + "," + (i < 5 ? "a" : "b") + "\n";
  return s;
}

TabularConfig ten_row_config(const TempDir& dir) {
  TabularConfig c;
  c.path = dir.write("ten.csv", ten_row_csv());
  c.label = "y";
  c.numeric = {"x"};
  c.categorical = {"kind"};
  return c;
}

}  // namespace

TEST_CASE("csv parser handles quotes, escaped quotes and CRLF") {
  std::istringstream in("a,b\r\n\"x, y\",\"say \"\"hi\"\"\"\r\n1,\n");
  auto rows = parse_csv(in);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1][0] == "x, y");
  CHECK(rows[1][1] == "say \"hi\"");
  CHECK(rows[2][1].empty());
}

TEST_CASE("ten-row csv splits 8/1/1 and is stable under the seed") {
  TempDir dir("data");
  auto cfg = ten_row_config(dir);
  auto a = load_tabular(cfg, {}, 42);
  auto b = load_tabular(cfg, {}, 42);
  CHECK(a.splits.train.size() == 8);
  CHECK(a.splits.val.size() == 1);
  CHECK(a.splits.test.size() == 1);
  CHECK(a.split_manifest().dump() == b.split_manifest().dump());
  auto c = load_tabular(cfg, {}, 43);
  CHECK(a.split_manifest()["train"] != c.split_manifest()["train"]);

  std::set<std::size_t> all;
  for (const auto* part : {&a.splits.train, &a.splits.val, &a.splits.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 10);
}

TEST_CASE("tabular loader reports structured errors") {
  TempDir dir("data");
  auto cfg = ten_row_config(dir);

  auto missing = cfg;
  missing.numeric = {"nope"};
  try {
    load_tabular(missing, {}, 0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(e.field() == "nope");
  }

  auto bad_number = cfg;
  bad_number.path = dir.write("bad.csv", "x,kind,y\n1,odd,a\nfoo,even,b\n");
  try {
    load_tabular(bad_number, {}, 0);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(e.field() == "x");
    CHECK(std::string(e.what()).find("foo") != std::string::npos);
  }

  auto empty_cell = cfg;
  empty_cell.path = dir.write("empty.csv", "x,kind,y\n1,,a\n2,odd,b\n");
  CHECK_THROWS_AS(load_tabular(empty_cell, {}, 0), DataError);

  auto unseen = cfg;
  unseen.classes = {"a", "c"};
  CHECK_THROWS_WITH_AS(load_tabular(unseen, {}, 0), doctest::Contains("unseen label"), DataError);
}

TEST_CASE("nearest-rank percentiles") {
  std::vector<double> v = {15, 20, 35, 40, 50};
  CHECK(nearest_rank(v, 25) == 20);
  CHECK(nearest_rank(v, 50) == 35);
  CHECK(nearest_rank(v, 75) == 40);
  CHECK(nearest_rank(v, 100) == 50);
  CHECK(nearest_rank({7}, 25) == 7);
}

TEST_CASE("percentile thresholds ignore held-out rows") {
  TempDir dir("data");
  auto cfg = ten_row_config(dir);
  auto ds = load_tabular(cfg, {}, 5);
  const auto before = ds.features[0].thresholds;

  // Rewrite the values of the held-out rows only; thresholds must not move.
  std::string s = "x,kind,y\n";
  std::set<std::size_t> held(ds.splits.val.begin(), ds.splits.val.end());
  held.insert(ds.splits.test.begin(), ds.splits.test.end());
  for (std::size_t i = 0; i < 10; ++i) {
    const int x = held.count(i) ? 1000 + static_cast<int>(i) : static_cast<int>(i);
    s += std::to_string(x) + "," + (i % 2 ? "odd" : "even") + "," + (i < 5 ? "a" : "b") + "\n";
  }
  cfg.path = dir.write("ten2.csv", s);
  auto ds2 = load_tabular(cfg, {}, 5);
  CHECK(ds2.features[0].thresholds == before);
}

TEST_CASE("adult split sizes and age thresholds") {
  auto cfg = DatasetConfig::load(lorex::testing::data_dir() / "adult.json");
  auto ds = load_dataset(cfg, 0);
  CHECK(ds.instances.size() == 48842);
  CHECK(ds.splits.train.size() == 39073);
  CHECK(ds.splits.val.size() == 4884);
  CHECK(ds.splits.test.size() == 4885);
  const auto& age = ds.features[static_cast<std::size_t>(ds.feature_index("age"))];
  CHECK(age.thresholds == std::vector<double>{28, 37, 48});
  CHECK(ds.classes == std::vector<std::string>{"<=50K", ">50K"});
  const auto& marital = ds.features[static_cast<std::size_t>(ds.feature_index("marital-status"))];
  CHECK(marital.category_code("Married") >= 0);
}

TEST_CASE("unknown categories encode to no one-hot slot") {
  TempDir dir("data");
  auto ds = load_tabular(ten_row_config(dir), {}, 1);
  auto inst = instance_from_json(ds, {{"x", 3}, {"kind", "prime"}});
  CHECK(inst.values[1] == -1);
  std::vector<double> enc(ds.input_dim());
  ds.encode(inst, enc.data());
  CHECK(enc[1] == 0.0);
  CHECK(enc[2] == 0.0);
  CHECK_THROWS_AS(instance_from_json(ds, {{"kind", "odd"}}), DataError);
  CHECK_THROWS_AS(instance_from_json(ds, {{"x", "abc"}, {"kind", "odd"}}), DataError);
}

TEST_CASE("tokenizer folds case and splits on punctuation") {
  CHECK(tokenize("Good good FOOD!") == std::vector<std::string>{"good", "good", "food"});
  CHECK(tokenize("  ") .empty());
  CHECK(tokenize("a1-b2") == std::vector<std::string>{"a1", "b2"});
}

TEST_CASE("text loader counts words and drops stopwords") {
  TempDir dir("text");
  auto stop = dir.write("stop.txt", "the\nand\n");
  std::string corpus;
  corpus += R"({"text": "Good good FOOD!", "label": "pos"})" "\n";
  corpus += R"({"text": "the and the", "label": "neg"})" "\n";
  for (int i = 0; i < 8; ++i) corpus += R"({"text": "the food was good and bad", "label": "neg"})" "\n";
  TextConfig cfg{dir.write("c.jsonl", corpus), 5000, stop, {}};
  auto ds = load_text(cfg, {1.0, 0.0}, 3);
  CHECK(ds.word_index("the") == -1);
  CHECK(ds.word_index("and") == -1);
  const auto good = ds.word_index("good"), food = ds.word_index("food");
  REQUIRE(good >= 0);
  REQUIRE(food >= 0);
  CHECK(ds.instances[0].tokens == std::vector<std::pair<int, int>>{
                                      std::minmax(std::pair{good, 2}, std::pair{food, 1}).first,
                                      std::minmax(std::pair{good, 2}, std::pair{food, 1}).second});
  CHECK(ds.empty_documents == std::vector<std::int64_t>{1});

  TextConfig small = cfg;
  small.vocab_size = 2;
  CHECK(load_text(small, {1.0, 0.0}, 3).vocab.size() == 2);

  TextConfig empty = cfg;
  empty.path = dir.write("e.jsonl", "\n");
  CHECK_THROWS_AS(load_text(empty, {}, 0), DataError);
}

TEST_CASE("review fixture vocabulary respects the size limit") {
  auto cfg = DatasetConfig::load(lorex::testing::test_data_dir() / "reviews.json");
  cfg.text.vocab_size = 10;
  auto ds = load_dataset(cfg, 0);
  CHECK(ds.vocab.size() <= 10);
  CHECK(ds.num_classes() == 2);
}

TEST_CASE("symmetric noise flips exactly round(rN) train labels") {
  TempDir dir("noise");
  std::string s = "x,y\n";
  for (int i = 0; i < 1250; ++i) s += std::to_string(i) + "," + (i % 3 == 0 ? "p" : "q") + "\n";
  TabularConfig cfg;
  cfg.path = dir.write("n.csv", s);
  cfg.label = "y";
  cfg.numeric = {"x"};
  const auto clean = load_tabular(cfg, {}, 9);
  REQUIRE(clean.splits.train.size() == 1000);

  auto zero = clean;
  CHECK(inject_symmetric_noise(zero, 0.0, 1).empty());
  for (std::size_t i = 0; i < clean.instances.size(); ++i) CHECK(zero.instances[i].label == clean.instances[i].label);

  auto noisy = clean;
  auto flipped = inject_symmetric_noise(noisy, 0.2, 1);
  CHECK(flipped.size() == 200);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < clean.instances.size(); ++i)
    if (noisy.instances[i].label != clean.instances[i].label) ++changed;
  CHECK(changed == 200);
  for (auto i : clean.splits.val) CHECK(noisy.instances[i].label == clean.instances[i].label);
  for (auto i : clean.splits.test) CHECK(noisy.instances[i].label == clean.instances[i].label);

  auto again = clean;
  CHECK(inject_symmetric_noise(again, 0.2, 1) == flipped);
  CHECK_THROWS_AS(inject_symmetric_noise(again, 0.6, 1), DataError);
  CHECK_THROWS_AS(inject_symmetric_noise(again, -0.1, 1), DataError);
}
