#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "../support/toy_pipeline.hpp"
#include "lorex/diff/graph.hpp"
#include "lorex/diff/ops.hpp"
#include "lorex/seed.hpp"

using namespace lorex;
using lorex::testing::toy_config;
using lorex::testing::toy_dataset;

namespace {

const PipelineResult& toy_run() {
  static const PipelineResult r = run_pipeline(toy_dataset(), toy_config());
  return r;
}

}  // namespace

TEST_CASE("average precision on a hand-worked ranking") {
  const std::vector<double> s = {0.9, 0.8, 0.7, 0.6};
  const std::vector<std::uint8_t> y = {1, 0, 1, 0};
  CHECK(average_precision(s, y) == doctest::Approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0)));
  const std::vector<std::uint8_t> perfect = {1, 1, 0, 0};
  CHECK(average_precision(s, perfect) == doctest::Approx(1.0));
  // Tied scores form one threshold.
  const std::vector<double> tied = {0.5, 0.5, 0.5, 0.5};
  CHECK(average_precision(tied, y) == doctest::Approx(0.5));
}

TEST_CASE("average precision agrees with the trapezoidal reference") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2000;
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = u(rng) < 0.25;
      s[i] = u(rng) + (y[i] ? 0.3 * t / 20.0 : 0.0);
    }
    const double ap = average_precision(s, y);
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
    CHECK(std::abs(ap - pr_auc_trapezoid(s, y)) < 0.01);
  }
}

TEST_CASE("macro F1 on a hand-worked confusion") {
  // class 0: tp 2, fp 1, fn 1 -> 4/6; class 1: tp 1, fp 1, fn 1 -> 2/4
  const std::vector<int> pred = {0, 0, 1, 0, 1};
  const std::vector<int> truth = {0, 0, 0, 1, 1};
  CHECK(macro_f1(pred, truth, 2) == doctest::Approx((4.0 / 6.0 + 0.5) / 2));
  CHECK(macro_f1(truth, truth, 2) == doctest::Approx(1.0));
}

TEST_CASE("minority class of Adult is the high-income label") {
  auto ds = load_dataset(DatasetConfig::load(lorex::testing::data_dir() / "adult.json"), 0);
  CHECK(ds.classes[static_cast<std::size_t>(minority_class(ds))] == ">50K");
}

TEST_CASE("defaults follow the reference training setup") {
  TrainConfig t;
  CHECK(t.epochs == 10);
  CHECK(t.batch == 16);
  CHECK(t.lr == 1e-5);
  CHECK(t.gamma == 0.95);
  CHECK(t.hidden == 512);
  CHECK(t.max_len == 4);
  PipelineConfig p;
  CHECK(p.pool.num_atoms == 5000);
  CHECK(p.sampler.min_df == 200);
  CHECK(p.sampler.per_length == 10000);
}

TEST_CASE("base model loss decreases on the toy data") {
  auto ds = toy_dataset();
  auto cfg = toy_config().train;
  MetricsReport report;
  train_base(ds, cfg, &report);
  REQUIRE(report.epochs.size() == cfg.epochs);
  CHECK(report.epochs.back().loss < report.epochs.front().loss);
  CHECK(report.test.pr_auc > 0.8);
  CHECK(report.best_epoch >= 1);
}

TEST_CASE("step-2 loss is the negative log confidence of the generated rule") {
  const auto& run = toy_run();
  auto ds = toy_dataset();
  const auto& model = run.selor;
  std::vector<std::size_t> rows(ds.splits.train.begin(), ds.splits.train.begin() + 6);
  HardPrior prior;
  std::mt19937_64 rng(3);
  auto out = model.forward(ds, rows, prior, Decode::Sample, &rng);
  std::vector<int> labels;
  for (auto r : rows) labels.push_back(ds.instances[r].label);
  const double loss = model.loss(out, labels).item();

  // Hand computation from the estimator alone on the generated ids.
  double want = 0;
  for (std::size_t b = 0; b < rows.size(); ++b) {
    auto e = model.estimator().predict(out.generation.ids[b]);
    want -= std::log(e.smoothed[static_cast<std::size_t>(labels[b])]);
  }
  CHECK(loss == doctest::Approx(want / static_cast<double>(rows.size())).epsilon(1e-10));

  // A constant rule penalty shifts the loss and leaves gradients alone.
  auto grads = [&](const RulePenalty& pen) {
    for (auto [name, t] : model.trainable()) t.zero_grad();
    auto l = model.loss(out, labels, pen);
    diff::backward(l);
    std::vector<double> g;
    for (const auto& [name, t] : model.trainable()) {
      auto v = t.grad();
      g.insert(g.end(), v.begin(), v.end());
    }
    return std::make_pair(l.item(), g);
  };
  std::mt19937_64 r1(9), r2(9);
  out = model.forward(ds, rows, prior, Decode::Sample, &r1);
  auto a = grads({});
  out = model.forward(ds, rows, prior, Decode::Sample, &r2);
  auto b = grads([](const std::vector<int>&) { return 0.75; });
  CHECK(b.first == doctest::Approx(a.first + 0.75).epsilon(1e-12));
  REQUIRE(a.second.size() == b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) CHECK(a.second[i] == b.second[i]);
}

TEST_CASE("the classifier sees only the antecedent") {
  const auto& run = toy_run();
  auto ds = toy_dataset();
  const auto& model = run.selor;
  // With only NULL available every row yields the empty rule, whatever x is.
  std::mt19937_64 rng(4);
  auto x = lorex::testing::random_tensor({5, ds.input_dim()}, rng, -3, 3);
  std::vector<std::vector<int>> only_null(5, std::vector<int>{kNullAtom});
  auto out = model.forward(x, only_null, HardPrior{}, Decode::Greedy, nullptr);
  for (std::size_t b = 1; b < 5; ++b)
    for (std::size_t k = 0; k < 2; ++k) CHECK(out.smoothed.at(b, k) == out.smoothed.at(0, k));
  auto prior = model.estimator().predict(std::vector<int>{});
  CHECK(out.smoothed.at(0, 1) == doctest::Approx(prior.smoothed[1]).epsilon(1e-12));
}

TEST_CASE("toy pipeline trains a usable self-explaining model") {
  const auto& run = toy_run();
  CHECK(run.selor_report.epochs.size() == toy_config().train.epochs);
  CHECK(run.selor_report.test.pr_auc > 0.8);
  CHECK(run.selor_report.test.f1 > 0.8);
  CHECK(run.pretrain_report.val_mae_p < 0.1);
  auto j = run.selor_report.to_json();
  CHECK(j["test"]["pr_auc"].get<double>() == run.selor_report.test.pr_auc);
  CHECK(run.selor_report.csv().rfind("model,epoch,loss", 0) == 0);
}

TEST_CASE("seeded pipeline runs are bit-reproducible") {
  auto again = run_pipeline(toy_dataset(), toy_config());
  const auto& run = toy_run();
  CHECK(again.base.params().fingerprint() == run.base.params().fingerprint());
  CHECK(again.selor.fingerprint() == run.selor.fingerprint());
  CHECK(again.selor_report.test.pr_auc == run.selor_report.test.pr_auc);
  auto other = run_pipeline(toy_dataset(), toy_config(1));
  CHECK(other.selor.fingerprint() != run.selor.fingerprint());
}

TEST_CASE("model checkpoints round-trip") {
  const auto& run = toy_run();
  lorex::testing::TempDir dir("trainer");
  run.base.save(dir.path() / "base.bin");
  auto base = BaseModel::load(dir.path() / "base.bin");
  CHECK(base.params().fingerprint() == run.base.params().fingerprint());
  run.selor.save(dir.path() / "selor");
  auto selor = SelorModel::load(dir.path() / "selor", run.pool);
  CHECK(selor.fingerprint() == run.selor.fingerprint());
  auto ds = toy_dataset();
  HardPrior prior;
  auto a = predict_selor(run.selor, ds, ds.splits.test, prior);
  auto b = predict_selor(selor, ds, ds.splits.test, prior);
  CHECK(a.ids == b.ids);
  CHECK(a.probs == b.probs);
}

TEST_CASE("noise grid covers both models at every ratio") {
  auto cfg = toy_config();
  cfg.train.epochs = 3;
  cfg.pretrain.epochs = 5;
  auto runs = run_noise_grid(toy_dataset(), cfg, {0.05, 0.1, 0.15, 0.2});
  REQUIRE(runs.size() == 8);
  for (std::size_t i = 0; i < runs.size(); ++i) {
    CHECK(runs[i].model == (i % 2 == 0 ? "base" : "selor"));
    CHECK(runs[i].test.pr_auc >= 0.0);
    CHECK(runs[i].test.pr_auc <= 1.0);
  }
  auto zero = run_noise_grid(toy_dataset(), cfg, {0.0});
  auto clean = run_pipeline(toy_dataset(), cfg);
  CHECK(zero[0].test.pr_auc == clean.base_report.test.pr_auc);
  CHECK(zero[1].test.pr_auc == clean.selor_report.test.pr_auc);
}
