#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace lorex {

/// Input that does not conform to the expected schema. `field` names the column,
/// key or row at fault.
class DataError : public std::runtime_error {
 public:
  DataError(std::string field, const std::string& message)
      : std::runtime_error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

enum class DatasetKind { Tabular, Text };
enum class FeatureKind { Categorical, Numeric };

struct Feature {
  std::string name;
  FeatureKind kind = FeatureKind::Numeric;
  std::vector<std::string> categories;  // train-split values, sorted
  std::vector<double> thresholds;       // 25/50/75 nearest-rank percentiles, deduplicated
  double mean = 0.0;                    // train statistics for standardisation
  double stddev = 1.0;

  int category_code(std::string_view value) const;  // -1 when unseen
};

struct Instance {
  std::int64_t id = 0;
  /// Tabular: one slot per feature; categorical slots hold the category code (-1 unseen).
  std::vector<double> values;
  /// Text: sorted (vocab id, count) pairs.
  std::vector<std::pair<int, int>> tokens;
  int length = 0;  // text: token count before vocabulary filtering
  int label = 0;
};

struct Splits {
  std::vector<std::size_t> train, val, test;
};

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
};

struct Dataset {
  std::string name;
  DatasetKind kind = DatasetKind::Tabular;
  std::vector<Feature> features;  // tabular only
  std::vector<std::string> vocab;  // text only
  std::vector<std::string> classes;
  std::vector<Instance> instances;
  Splits splits;
  std::uint64_t seed = 0;
  std::vector<std::int64_t> empty_documents;  // text ids with no vocabulary word

  std::size_t num_classes() const { return classes.size(); }
  std::size_t train_size() const { return splits.train.size(); }
  const Instance& train(std::size_t j) const { return instances[splits.train[j]]; }
  int feature_index(std::string_view name) const;  // -1 when absent
  int word_index(std::string_view word) const;     // -1 when absent
  /// Width of the dense backbone input.
  std::size_t input_dim() const;
  /// Tabular: standardised numerics then one-hot categoricals; text: counts / total.
  void encode(const Instance& x, double* out) const;
  std::vector<double> encode_rows(const std::vector<std::size_t>& rows) const;
  /// Split membership and sizes, for reproducibility.
  nlohmann::json split_manifest() const;
  /// Label frequencies over the train split.
  std::vector<double> train_prior() const;
};

struct TabularConfig {
  std::filesystem::path path;
  std::string label;
  std::vector<std::string> numeric;
  std::vector<std::string> categorical;
  std::vector<std::string> classes;  // optional explicit order; empty = sorted unique
};

struct TextConfig {
  std::filesystem::path path;
  std::size_t vocab_size = 5000;
  std::filesystem::path stopwords;   // one word per line; empty = none
  std::vector<std::string> classes;  // optional explicit order
};

/// Dataset description file (JSON). Relative paths resolve against the file's directory.
struct DatasetConfig {
  std::string name;
  DatasetKind kind = DatasetKind::Tabular;
  TabularConfig tabular;
  TextConfig text;
  SplitRatios ratios;

  static DatasetConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static DatasetConfig load(const std::filesystem::path& path);
};

std::vector<std::vector<std::string>> parse_csv(std::istream& in);

/// Nearest-rank percentile of sorted values: v[ceil(p/100 * n) - 1].
double nearest_rank(const std::vector<double>& sorted, double p);

/// Seeded permutation split: floor(train*n), floor(val*n), remainder.
Splits make_splits(std::size_t n, SplitRatios ratios, std::uint64_t seed);

Dataset load_tabular(const TabularConfig& config, SplitRatios ratios, std::uint64_t seed,
                     std::string name = "tabular");
Dataset load_text(const TextConfig& config, SplitRatios ratios, std::uint64_t seed, std::string name = "text");
Dataset load_dataset(const DatasetConfig& config, std::uint64_t seed);

/// Lowercase and split on non-alphanumeric characters.
std::vector<std::string> tokenize(std::string_view text);
std::vector<std::string> load_stopwords(const std::filesystem::path& path);

/// Reassigns exactly round(r * N) train labels uniformly among the other K-1 classes.
/// Returns the flipped instance indices, sorted.
std::vector<std::size_t> inject_symmetric_noise(Dataset& dataset, double ratio, std::uint64_t seed);

/// Builds an instance from named raw values (strings or numbers); the inverse of a CSV row.
Instance instance_from_json(const Dataset& dataset, const nlohmann::json& fields);

}  // namespace lorex
