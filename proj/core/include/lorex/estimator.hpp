#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "lorex/coverage.hpp"
#include "lorex/diff/layers.hpp"

namespace lorex {

/// Posterior predictive of a categorical with symmetric concentration beta:
/// (p_hat * n + beta) / (n + K * beta).
std::vector<double> smooth(std::span<const double> p_hat, double n, double beta);

struct EstimatorConfig {
  std::size_t max_len = 4;
  std::size_t width = 512;  // atom embedding width
  std::size_t ffn = 512;
  std::size_t mlp_hidden = 256;
  std::size_t depth = 1;
  bool positional = false;
  std::size_t num_classes = 2;
  std::size_t train_size = 0;  // N, converts coverage to counts
  double log_sigma_floor = -6.0;
};

struct ConsequentEstimate {
  std::vector<double> p;         // p~(y|alpha)
  double c = 0.0;                // c~ in [0,1]
  double n = 0.0;                // c~ * N
  std::vector<double> smoothed;  // posterior with the current beta
};

struct PretrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 16;
  double lr = 1e-5;
  double gamma = 0.95;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  bool train_embeddings = true;
};

struct PretrainEpoch {
  std::size_t epoch = 0;
  double loss = 0, mae_p = 0, mae_c = 0, sigma_p = 0, sigma_n = 0, seconds = 0;
};

struct PretrainReport {
  std::vector<PretrainEpoch> epochs;
  double val_mae_p = 0;               // mean |p~ - p_hat| over held-out rules and classes
  std::vector<double> val_mae_p_by_len;  // index l-1
  double val_mae_c = 0;
  std::size_t train_rules = 0, val_rules = 0;
  double seconds = 0;
  std::string csv() const;
};

/// Neural surrogate for p_hat(y|alpha) and coverage: atom embeddings -> encoder
/// (single-head self-attention) -> mean over non-NULL positions -> MLP -> class
/// and coverage heads. An antecedent without non-NULL atoms is answered with the
/// train prior at full coverage.
class ConsequentEstimator {
 public:
  ConsequentEstimator() = default;
  ConsequentEstimator(const EstimatorConfig& config, std::span<const double> atom_embeddings,
                      std::vector<double> train_prior, std::uint64_t seed);

  struct Output {
    diff::Tensor probs;     // [B, K]
    diff::Tensor coverage;  // [B, 1]
  };

  /// `inputs` holds B*L embedding rows; `valid` flags non-NULL positions.
  Output forward(const diff::Tensor& inputs, std::span<const std::uint8_t> valid) const;
  /// Same, looking ids up in the estimator's own embedding table. NULL (0) pads.
  Output forward_ids(std::span<const int> ids) const;
  /// smooth() applied to network outputs with the learnable beta: [B, K].
  diff::Tensor smoothed(const Output& out) const;
  /// Multi-task uncertainty loss over a batch.
  diff::Tensor loss(const Output& out, const diff::Tensor& p_target, const diff::Tensor& c_target) const;

  ConsequentEstimate predict(std::span<const int> antecedent) const;
  std::vector<ConsequentEstimate> predict_batch(const std::vector<std::vector<int>>& antecedents) const;

  PretrainReport pretrain(const std::vector<SampledRule>& rules, const PretrainConfig& config,
                          const std::function<void(const PretrainEpoch&)>& on_epoch = {});
  /// Mean absolute error of p~ against p_hat (averaged over classes) and of c~ against n/N.
  std::pair<double, double> evaluate(const std::vector<SampledRule>& rules) const;

  double beta() const;
  double sigma_p() const;
  double sigma_n() const;
  const diff::Tensor& beta_raw() const { return beta_raw_; }
  const diff::Tensor& embeddings() const { return embeddings_; }
  /// Freezes every parameter except beta (step-2 regime).
  void freeze_except_beta();
  diff::ParameterStore& params() { return params_; }
  const diff::ParameterStore& params() const { return params_; }
  const EstimatorConfig& config() const { return config_; }
  const std::vector<double>& train_prior() const { return prior_; }

  void save(const std::filesystem::path& path) const;
  static ConsequentEstimator load(const std::filesystem::path& path);

 private:
  void build(std::uint64_t seed, std::span<const double> atom_embeddings);
  std::vector<int> pad(std::span<const int> antecedent) const;

  EstimatorConfig config_;
  std::vector<double> prior_;
  diff::ParameterStore params_;
  diff::Tensor embeddings_;
  diff::Tensor positions_;
  std::vector<diff::EncoderLayer> encoder_;
  diff::Linear mlp_, class_head_, coverage_head_;
  diff::Tensor log_sigma_p_, log_sigma_n_, beta_raw_;
};

}  // namespace lorex
