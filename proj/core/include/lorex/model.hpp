#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include "lorex/atoms.hpp"
#include "lorex/data.hpp"
#include "lorex/estimator.hpp"
#include "lorex/generator.hpp"

namespace lorex {

/// The unexplainable baseline: backbone followed by a linear classifier.
class BaseModel {
 public:
  BaseModel() = default;
  BaseModel(std::size_t input_dim, std::size_t hidden, std::size_t num_classes, std::uint64_t seed);

  diff::Tensor representation(const diff::Tensor& x) const { return backbone_(x); }
  diff::Tensor logits(const diff::Tensor& x) const;
  /// Class probabilities for the given dataset rows: [rows, K] row-major.
  std::vector<double> predict_proba(const Dataset& dataset, const std::vector<std::size_t>& rows) const;
  /// Backbone outputs for the given rows: [rows, hidden] row-major.
  std::vector<double> representations(const Dataset& dataset, const std::vector<std::size_t>& rows) const;

  std::size_t input_dim() const { return backbone_.input_dim(); }
  std::size_t hidden() const { return backbone_.output_dim(); }
  std::size_t num_classes() const { return head_.out_features(); }
  diff::ParameterStore& params() { return params_; }
  const diff::ParameterStore& params() const { return params_; }

  void save(const std::filesystem::path& path) const;
  static BaseModel load(const std::filesystem::path& path);

 private:
  diff::ParameterStore params_;
  Backbone backbone_;
  diff::Linear head_;
};

/// Additive rule penalty evaluated on the raw generated ids; positive values penalise.
using RulePenalty = std::function<double(const std::vector<int>&)>;

/// Self-explaining classifier: generator proposes an antecedent, the frozen
/// consequent estimator turns it into a smoothed class distribution.
class SelorModel {
 public:
  SelorModel() = default;
  SelorModel(const GeneratorConfig& config, AtomPool pool, ConsequentEstimator estimator, std::uint64_t seed);

  struct Output {
    Generation generation;
    diff::Tensor smoothed;  // [B, K]
  };

  /// `rows` are dataset instance indices; candidates come from the atom pool.
  Output forward(const Dataset& dataset, const std::vector<std::size_t>& rows, const HardPrior& prior, Decode mode,
                 std::mt19937_64* rng) const;
  /// Same with pre-encoded inputs and explicit candidate lists.
  Output forward(const diff::Tensor& x, const std::vector<std::vector<int>>& satisfied, const HardPrior& prior,
                 Decode mode, std::mt19937_64* rng) const;
  /// Mean over the batch of -log smoothed(y*|alpha) plus the mean penalty.
  diff::Tensor loss(const Output& out, std::span<const int> labels, const RulePenalty& penalty = {}) const;

  /// Copies backbone weights from a trained base model.
  void init_backbone_from(const BaseModel& base);
  /// Step-2 trainable set: backbone, decoder, generator atom table and the estimator's beta.
  std::vector<std::pair<std::string, diff::Tensor>> trainable() const;

  const AtomPool& pool() const { return pool_; }
  const AntecedentGenerator& generator() const { return generator_; }
  const ConsequentEstimator& estimator() const { return estimator_; }
  ConsequentEstimator& estimator() { return estimator_; }
  diff::ParameterStore& params() { return params_; }
  const diff::ParameterStore& params() const { return params_; }
  std::size_t num_classes() const { return estimator_.config().num_classes; }
  /// Digest over generator and estimator parameters.
  std::uint64_t fingerprint() const;

  /// Writes generator.bin and estimator.bin into `dir`.
  void save(const std::filesystem::path& dir) const;
  static SelorModel load(const std::filesystem::path& dir, AtomPool pool);

 private:
  AtomPool pool_;
  diff::ParameterStore params_;
  AntecedentGenerator generator_;
  ConsequentEstimator estimator_;
};

}  // namespace lorex
