#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorex/coverage.hpp"
#include "lorex/model.hpp"

namespace lorex {

/// Average precision: sum over ranks of (R_k - R_{k-1}) * P_k, ties broken by
/// treating equal scores as one threshold.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positive);
/// Trapezoidal area under the precision-recall curve, for cross-checking.
double pr_auc_trapezoid(std::span<const double> scores, std::span<const std::uint8_t> positive);
/// Unweighted mean of per-class F1.
double macro_f1(std::span<const int> predicted, std::span<const int> truth, std::size_t num_classes);
/// Least frequent class over the train split, the positive class for PR-AUC.
int minority_class(const Dataset& dataset);

struct Metrics {
  double pr_auc = 0;
  double f1 = 0;
  double accuracy = 0;
  nlohmann::json to_json() const;
};

/// Scores from class probabilities [n, K] against the dataset's labels.
Metrics score(const Dataset& dataset, const std::vector<std::size_t>& rows, std::span<const double> probs);

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double lr = 1e-5;
  double gamma = 0.95;
  std::uint64_t seed = 0;
  std::size_t hidden = 512;
  std::size_t max_len = 4;
  /// Keep the parameters of the epoch with the best validation PR-AUC.
  bool select_best = true;
  nlohmann::json to_json() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0;
  Metrics val;
  double seconds = 0;
};

struct MetricsReport {
  std::string model;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  Metrics val;
  Metrics test;
  double seconds = 0;
  nlohmann::json to_json() const;
  std::string csv() const;
};

using EpochCallback = std::function<void(const EpochLog&)>;

BaseModel train_base(const Dataset& dataset, const TrainConfig& config, MetricsReport* report = nullptr,
                     const EpochCallback& on_epoch = {});
Metrics evaluate_base(const BaseModel& model, const Dataset& dataset, const std::vector<std::size_t>& rows);

/// Greedy-decoded smoothed distributions [rows, K] and the raw generated ids.
struct SelorPredictions {
  std::vector<double> probs;
  std::vector<std::vector<int>> ids;
};
SelorPredictions predict_selor(const SelorModel& model, const Dataset& dataset, const std::vector<std::size_t>& rows,
                               const HardPrior& prior);
Metrics evaluate_selor(const SelorModel& model, const Dataset& dataset, const std::vector<std::size_t>& rows,
                       const HardPrior& prior);

/// Step 2: trains backbone, decoder and atom table (plus beta) on -log p(y*|alpha).
MetricsReport train_selor(SelorModel& model, const Dataset& dataset, const TrainConfig& config,
                          const RulePenalty& penalty = {}, const EpochCallback& on_epoch = {});

/// Every in-process stage, from base model to trained self-explaining model.
struct PipelineConfig {
  TrainConfig train;
  PoolConfig pool;
  SamplerConfig sampler;
  PretrainConfig pretrain;
  std::size_t estimator_ffn = 512;
  std::size_t estimator_mlp = 256;
  double noise_ratio = 0.0;
  /// Expands the single seed into per-stage seeds.
  void set_seed(std::uint64_t seed);
  nlohmann::json to_json() const;
};

struct PipelineResult {
  BaseModel base;
  MetricsReport base_report;
  AtomPool pool;
  SampledRuleSet rules;
  PretrainReport pretrain_report;
  SelorModel selor;
  MetricsReport selor_report;
  std::vector<std::size_t> flipped;  // train positions with injected noise
  double seconds = 0;
};

using Progress = std::function<void(const std::string&)>;

/// Estimator configuration matching a dataset and training setup.
EstimatorConfig estimator_config(const Dataset& dataset, const PipelineConfig& config);
/// Builds atoms and initialises their embeddings from base-model train representations.
AtomPool build_atoms(const Dataset& dataset, const BaseModel& base, const PoolConfig& config);
PipelineResult run_pipeline(Dataset dataset, const PipelineConfig& config, const Progress& progress = {});

struct NoiseGridRun {
  double ratio = 0;
  std::string model;  // "base" or "selor"
  Metrics test;
};
/// Trains both models per ratio on flipped train labels; scores on the clean test split.
std::vector<NoiseGridRun> run_noise_grid(const Dataset& dataset, const PipelineConfig& config,
                                         const std::vector<double>& ratios, const Progress& progress = {});

}  // namespace lorex
