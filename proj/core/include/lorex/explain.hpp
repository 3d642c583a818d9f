#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorex/coverage.hpp"
#include "lorex/model.hpp"

namespace lorex {

struct Explanation {
  std::int64_t instance_id = -1;
  std::vector<int> raw_ids;   // generated, NULL included
  std::vector<int> atom_ids;  // NULL and redundant atoms stripped
  std::vector<std::string> atoms;
  int predicted_class = 0;
  double confidence = 0;             // smoothed posterior of the predicted class
  std::vector<double> distribution;  // smoothed posterior over classes
  std::size_t coverage_n = 0;        // exact train coverage
  double coverage_pct = 0;
  std::size_t null_count = 0;

  nlohmann::json to_json(const Dataset& dataset) const;
};

/// Greedy explanations from a trained model with exact coverage lookups.
/// Thread-safe for concurrent calls; the model is treated as immutable.
class Explainer {
 public:
  Explainer(std::shared_ptr<const SelorModel> model, std::shared_ptr<const Dataset> dataset);

  Explanation explain(const Instance& x, const HardPrior& prior) const;
  std::vector<Explanation> explain_rows(const std::vector<std::size_t>& rows, const HardPrior& prior) const;
  /// Explanations of a whole split under the default prior, computed once.
  const std::vector<Explanation>& baseline(const std::string& split) const;
  const std::vector<std::size_t>& split_rows(const std::string& split) const;

  HardPrior default_prior() const;
  const SelorModel& model() const { return *model_; }
  const Dataset& dataset() const { return *dataset_; }
  const TrueMatrix& true_matrix() const { return matrix_; }

 private:
  Explanation finish(std::int64_t id, std::vector<int> raw, std::span<const double> dist) const;

  std::shared_ptr<const SelorModel> model_;
  std::shared_ptr<const Dataset> dataset_;
  TrueMatrix matrix_;
  mutable std::mutex cache_mutex_;
  mutable std::map<std::string, std::vector<Explanation>> cache_;
};

/// k-means with k-means++ seeding. Returns one cluster index per point.
std::vector<int> kmeans(std::span<const double> points, std::size_t dim, std::size_t k, std::uint64_t seed,
                        std::size_t max_iter = 100);

struct ClusterStats {
  std::size_t members = 0;
  double percent = 0;
  double accuracy = 0;
  int label = 0;            // majority true label
  double label_ratio = 0;   // share of that label among members
  std::optional<double> mean_length;  // text datasets only
  std::vector<std::pair<int, std::size_t>> top_atoms;  // by frequency
};

struct ClusterReport {
  std::size_t k = 0;
  std::size_t total = 0;
  std::vector<ClusterStats> clusters;

  nlohmann::json to_json(const AtomPool& pool, const Dataset& dataset) const;
  /// Plain-text table: cluster, Acc, Label, Num, [Len,] atoms.
  std::string table(const AtomPool& pool, const Dataset& dataset, std::size_t atoms_shown = 5) const;
};

/// Clusters explanations by the mean generator embedding of their atoms.
ClusterReport cluster_explanations(const std::vector<Explanation>& explanations, const Dataset& dataset,
                                   const AtomPool& pool, std::span<const double> atom_embeddings, std::size_t dim,
                                   std::size_t k, std::uint64_t seed, std::size_t top_atoms = 10);

struct SplitDelta {
  std::string split;
  std::size_t affected = 0;
  double accuracy_before = 0;
  double accuracy_after = 0;
};

struct InstanceDelta {
  std::string split;
  Explanation before;
  Explanation after;
  bool correct_before = false;
  bool correct_after = false;
};

struct SteeringReport {
  std::vector<int> excluded;  // whole session
  std::size_t version = 0;
  std::size_t affected = 0;
  std::vector<std::pair<int, std::size_t>> replacements;  // atoms gained, by count
  std::vector<SplitDelta> splits;
  std::vector<InstanceDelta> instances;

  nlohmann::json to_json(const AtomPool& pool, const Dataset& dataset, std::size_t max_instances = 100) const;
};

/// Test-time exclusion of atoms. Only the candidate masks change; the model is untouched.
class SteeringSession {
 public:
  SteeringSession(std::shared_ptr<const Explainer> explainer, std::vector<std::string> splits = {"test", "train"});

  /// Adds exclusions and re-explains the instances whose current explanation used any of them.
  SteeringReport exclude(const std::vector<int>& atom_ids);
  void reset();

  Explanation explain(const Instance& x) const;
  /// Current explanation of a dataset row in one of the session's splits.
  const Explanation& current(const std::string& split, std::size_t position) const;
  HardPrior prior() const;
  const std::set<int>& excluded() const { return excluded_; }
  std::size_t version() const { return version_; }

 private:
  std::shared_ptr<const Explainer> explainer_;
  std::vector<std::string> splits_;
  std::set<int> excluded_;
  std::size_t version_ = 0;
  std::map<std::string, std::unordered_map<std::size_t, Explanation>> overrides_;
};

}  // namespace lorex
