#include "lorex/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "lorex/diff/adam.hpp"
#include "lorex/diff/graph.hpp"
#include "lorex/diff/ops.hpp"
#include "lorex/seed.hpp"

namespace lorex {

using diff::Tensor;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Curve {
  std::vector<double> recall, precision;
};

// One point per distinct score threshold, highest first.
Curve pr_curve(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("pr curve: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const auto total_pos = static_cast<double>(std::count(positive.begin(), positive.end(), 1));
  Curve c;
  double tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    tp += positive[order[i]] ? 1 : 0;
    seen += 1;
    if (i + 1 < order.size() && scores[order[i + 1]] == scores[order[i]]) continue;
    c.recall.push_back(total_pos > 0 ? tp / total_pos : 0.0);
    c.precision.push_back(tp / seen);
  }
  return c;
}

std::vector<std::uint8_t> positives(const Dataset& dataset, const std::vector<std::size_t>& rows, int cls) {
  std::vector<std::uint8_t> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = dataset.instances[rows[i]].label == cls;
  return out;
}

struct Snapshot {
  std::vector<std::vector<double>> values;

  void take(const std::vector<std::pair<std::string, Tensor>>& params) {
    values.clear();
    for (const auto& [name, t] : params) values.emplace_back(t.data().begin(), t.data().end());
  }
  void restore(const std::vector<std::pair<std::string, Tensor>>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto t = params[i].second;
      std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
    }
  }
};

void check_finite(double loss, const std::string& model, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error(model + " training diverged at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch) + ": loss " + std::to_string(loss));
  }
}

nlohmann::json epochs_json(const std::vector<EpochLog>& epochs) {
  auto arr = nlohmann::json::array();
  for (const auto& e : epochs)
    arr.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"val", e.val.to_json()}, {"seconds", e.seconds}});
  return arr;
}

}  // namespace

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  auto c = pr_curve(scores, positive);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < c.recall.size(); ++i) {
    ap += (c.recall[i] - prev_r) * c.precision[i];
    prev_r = c.recall[i];
  }
  return ap;
}

double pr_auc_trapezoid(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  auto c = pr_curve(scores, positive);
  double area = 0, prev_r = 0, prev_p = 1;
  for (std::size_t i = 0; i < c.recall.size(); ++i) {
    area += (c.recall[i] - prev_r) * (c.precision[i] + prev_p) / 2;
    prev_r = c.recall[i];
    prev_p = c.precision[i];
  }
  return area;
}

double macro_f1(std::span<const int> predicted, std::span<const int> truth, std::size_t num_classes) {
  if (predicted.size() != truth.size()) throw std::invalid_argument("macro_f1: prediction and truth differ in length");
  std::vector<double> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(predicted[i]), t = static_cast<std::size_t>(truth[i]);
    if (p == t) {
      tp[t] += 1;
    } else {
      fp[p] += 1;
      fn[t] += 1;
    }
  }
  double total = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double denom = 2 * tp[k] + fp[k] + fn[k];
    total += denom > 0 ? 2 * tp[k] / denom : 0.0;
  }
  return total / static_cast<double>(num_classes);
}

int minority_class(const Dataset& dataset) {
  auto prior = dataset.train_prior();
  return static_cast<int>(std::min_element(prior.begin(), prior.end()) - prior.begin());
}

nlohmann::json Metrics::to_json() const { return {{"pr_auc", pr_auc}, {"f1", f1}, {"accuracy", accuracy}}; }

Metrics score(const Dataset& dataset, const std::vector<std::size_t>& rows, std::span<const double> probs) {
  const std::size_t k = dataset.num_classes();
  if (probs.size() != rows.size() * k) throw std::invalid_argument("score: probability matrix does not match rows");
  const int pos = minority_class(dataset);
  std::vector<double> s(rows.size());
  std::vector<int> pred(rows.size()), truth(rows.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* p = probs.data() + i * k;
    s[i] = p[pos];
    pred[i] = static_cast<int>(std::max_element(p, p + k) - p);
    truth[i] = dataset.instances[rows[i]].label;
    correct += pred[i] == truth[i];
  }
  Metrics m;
  m.pr_auc = average_precision(s, positives(dataset, rows, pos));
  m.f1 = macro_f1(pred, truth, k);
  m.accuracy = rows.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(rows.size());
  return m;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch", batch},   {"lr", lr},           {"gamma", gamma},
          {"seed", seed},     {"hidden", hidden}, {"max_len", max_len}, {"select_best", select_best}};
}

nlohmann::json MetricsReport::to_json() const {
  return {{"model", model},           {"epochs", epochs_json(epochs)}, {"best_epoch", best_epoch},
          {"val", val.to_json()},     {"test", test.to_json()},        {"seconds", seconds}};
}

std::string MetricsReport::csv() const {
  std::ostringstream os;
  os << "model,epoch,loss,val_pr_auc,val_f1,val_accuracy,seconds\n";
  for (const auto& e : epochs)
    os << model << ',' << e.epoch << ',' << e.loss << ',' << e.val.pr_auc << ',' << e.val.f1 << ',' << e.val.accuracy
       << ',' << e.seconds << '\n';
  return os.str();
}

Metrics evaluate_base(const BaseModel& model, const Dataset& dataset, const std::vector<std::size_t>& rows) {
  return score(dataset, rows, model.predict_proba(dataset, rows));
}

BaseModel train_base(const Dataset& dataset, const TrainConfig& config, MetricsReport* report,
                     const EpochCallback& on_epoch) {
  const auto t0 = Clock::now();
  BaseModel model(dataset.input_dim(), config.hidden, dataset.num_classes(), config.seed);
  const auto& train = dataset.splits.train;
  if (train.empty()) throw DataError("train", "split is empty");
  const std::size_t dim = dataset.input_dim();
  const auto features = dataset.encode_rows(train);

  diff::Adam opt({.lr = config.lr});
  opt.add_all(model.params());
  diff::ExponentialLR sched(opt, config.gamma);
  std::mt19937_64 rng(derive_seed(config.seed, "base.shuffle"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  MetricsReport local;
  local.model = "base";
  const auto params = model.params().entries();
  Snapshot best;
  double best_score = -1;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto te = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      std::vector<double> x((end - start) * dim);
      std::vector<int> y(end - start);
      for (std::size_t i = start; i < end; ++i) {
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(order[i] * dim), dim,
                    x.begin() + static_cast<std::ptrdiff_t>((i - start) * dim));
        y[i - start] = dataset.instances[train[order[i]]].label;
      }
      opt.zero_grad();
      auto loss = diff::cross_entropy(model.logits(Tensor::constant({end - start, dim}, std::move(x))), y);
      check_finite(loss.item(), "base", epoch, batches);
      loss_sum += loss.item();
      diff::backward(loss);
      opt.step();
      ++batches;
    }
    sched.step();
    EpochLog log{epoch, loss_sum / static_cast<double>(batches), evaluate_base(model, dataset, dataset.splits.val),
                 since(te)};
    local.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (!config.select_best || log.val.pr_auc > best_score) {
      best_score = log.val.pr_auc;
      local.best_epoch = epoch;
      best.take(params);
    }
  }
  if (!best.values.empty()) best.restore(params);
  local.val = evaluate_base(model, dataset, dataset.splits.val);
  local.test = evaluate_base(model, dataset, dataset.splits.test);
  local.seconds = since(t0);
  if (report) *report = std::move(local);
  return model;
}

SelorPredictions predict_selor(const SelorModel& model, const Dataset& dataset, const std::vector<std::size_t>& rows,
                               const HardPrior& prior) {
  SelorPredictions out;
  out.probs.reserve(rows.size() * model.num_classes());
  out.ids.reserve(rows.size());
  constexpr std::size_t chunk = 512;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    std::vector<std::size_t> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                  rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + chunk)));
    auto o = model.forward(dataset, part, prior, Decode::Greedy, nullptr);
    out.probs.insert(out.probs.end(), o.smoothed.data().begin(), o.smoothed.data().end());
    for (auto& ids : o.generation.ids) out.ids.push_back(std::move(ids));
  }
  return out;
}

Metrics evaluate_selor(const SelorModel& model, const Dataset& dataset, const std::vector<std::size_t>& rows,
                       const HardPrior& prior) {
  return score(dataset, rows, predict_selor(model, dataset, rows, prior).probs);
}

MetricsReport train_selor(SelorModel& model, const Dataset& dataset, const TrainConfig& config,
                          const RulePenalty& penalty, const EpochCallback& on_epoch) {
  const auto t0 = Clock::now();
  const auto& train = dataset.splits.train;
  if (train.empty()) throw DataError("train", "split is empty");
  HardPrior prior;
  prior.max_len = config.max_len;
  const std::size_t dim = dataset.input_dim();
  const auto features = dataset.encode_rows(train);
  std::vector<std::vector<int>> satisfied;
  satisfied.reserve(train.size());
  for (auto r : train) satisfied.push_back(model.pool().satisfied(dataset.instances[r]));

  const auto params = model.trainable();
  for (const auto& [name, t] : params) {
    auto p = t;
    p.set_requires_grad(true);
  }
  diff::Adam opt({.lr = config.lr});
  for (const auto& [name, t] : params) opt.add(name, t);
  diff::ExponentialLR sched(opt, config.gamma);
  std::mt19937_64 shuffle_rng(derive_seed(config.seed, "selor.shuffle"));
  std::mt19937_64 gumbel_rng(derive_seed(config.seed, "selor.gumbel"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  MetricsReport report;
  report.model = "selor";
  Snapshot best;
  double best_score = -1;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto te = Clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t end = std::min(order.size(), start + config.batch);
      std::vector<double> x((end - start) * dim);
      std::vector<int> y(end - start);
      std::vector<std::vector<int>> cand;
      cand.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(order[i] * dim), dim,
                    x.begin() + static_cast<std::ptrdiff_t>((i - start) * dim));
        y[i - start] = dataset.instances[train[order[i]]].label;
        cand.push_back(satisfied[order[i]]);
      }
      opt.zero_grad();
      auto out = model.forward(Tensor::constant({end - start, dim}, std::move(x)), cand, prior, Decode::Sample,
                               &gumbel_rng);
      auto loss = model.loss(out, y, penalty);
      check_finite(loss.item(), "selor", epoch, batches);
      loss_sum += loss.item();
      diff::backward(loss);
      opt.step();
      ++batches;
    }
    sched.step();
    EpochLog log{epoch, loss_sum / static_cast<double>(batches),
                 evaluate_selor(model, dataset, dataset.splits.val, prior), since(te)};
    report.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (!config.select_best || log.val.pr_auc > best_score) {
      best_score = log.val.pr_auc;
      report.best_epoch = epoch;
      best.take(params);
    }
  }
  if (!best.values.empty()) best.restore(params);
  report.val = evaluate_selor(model, dataset, dataset.splits.val, prior);
  report.test = evaluate_selor(model, dataset, dataset.splits.test, prior);
  report.seconds = since(t0);
  return report;
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  train.seed = seed;
  sampler.seed = seed;
  pretrain.seed = seed;
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"train", train.to_json()},
          {"num_atoms", pool.num_atoms},
          {"min_df", sampler.min_df},
          {"pretrain_samples", sampler.per_length},
          {"sampler_k", sampler.k},
          {"max_rule_len", sampler.max_len},
          {"pretrain",
           {{"epochs", pretrain.epochs},
            {"batch", pretrain.batch},
            {"lr", pretrain.lr},
            {"gamma", pretrain.gamma},
            {"val_fraction", pretrain.val_fraction}}},
          {"estimator_ffn", estimator_ffn},
          {"estimator_mlp", estimator_mlp},
          {"noise_ratio", noise_ratio}};
}

EstimatorConfig estimator_config(const Dataset& dataset, const PipelineConfig& config) {
  EstimatorConfig c;
  c.max_len = config.train.max_len;
  c.width = config.train.hidden;
  c.ffn = config.estimator_ffn;
  c.mlp_hidden = config.estimator_mlp;
  c.num_classes = dataset.num_classes();
  c.train_size = dataset.train_size();
  return c;
}

AtomPool build_atoms(const Dataset& dataset, const BaseModel& base, const PoolConfig& config) {
  auto pool = AtomPool::build(dataset, config);
  pool.init_embeddings(dataset, base.representations(dataset, dataset.splits.train), base.hidden());
  return pool;
}

PipelineResult run_pipeline(Dataset dataset, const PipelineConfig& config, const Progress& progress) {
  const auto t0 = Clock::now();
  auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  PipelineResult r;
  if (config.noise_ratio > 0) r.flipped = inject_symmetric_noise(dataset, config.noise_ratio, config.train.seed);
  say("training base model");
  r.base = train_base(dataset, config.train, &r.base_report, [&](const EpochLog& e) {
    say("base epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) + " val PR-AUC " +
        std::to_string(e.val.pr_auc));
  });
  say("building atoms");
  r.pool = build_atoms(dataset, r.base, config.pool);
  auto tm = TrueMatrix::build(r.pool, dataset);
  auto sc = config.sampler;
  sc.max_len = config.train.max_len;
  r.rules = sample_rules(tm, sc);
  for (const auto& w : r.rules.warnings) say("warning: " + w);
  say("pretraining consequent estimator on " + std::to_string(r.rules.size()) + " rules");
  ConsequentEstimator est(estimator_config(dataset, config), r.pool.embeddings(), dataset.train_prior(),
                          config.pretrain.seed);
  r.pretrain_report = est.pretrain(r.rules.flatten(), config.pretrain, [&](const PretrainEpoch& e) {
    say("estimator epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) + " val MAE " +
        std::to_string(e.mae_p));
  });
  GeneratorConfig gc;
  gc.input_dim = dataset.input_dim();
  gc.hidden = config.train.hidden;
  r.selor = SelorModel(gc, r.pool, std::move(est), config.train.seed);
  r.selor.init_backbone_from(r.base);
  say("training self-explaining model");
  r.selor_report = train_selor(r.selor, dataset, config.train, {}, [&](const EpochLog& e) {
    say("selor epoch " + std::to_string(e.epoch) + " loss " + std::to_string(e.loss) + " val PR-AUC " +
        std::to_string(e.val.pr_auc));
  });
  r.seconds = since(t0);
  return r;
}

std::vector<NoiseGridRun> run_noise_grid(const Dataset& dataset, const PipelineConfig& config,
                                         const std::vector<double>& ratios, const Progress& progress) {
  std::vector<NoiseGridRun> runs;
  for (double ratio : ratios) {
    auto c = config;
    c.noise_ratio = ratio;
    if (progress) progress("noise ratio " + std::to_string(ratio));
    auto r = run_pipeline(dataset, c, progress);
    runs.push_back({ratio, "base", r.base_report.test});
    runs.push_back({ratio, "selor", r.selor_report.test});
  }
  return runs;
}

}  // namespace lorex
