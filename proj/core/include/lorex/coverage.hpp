#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lorex/atoms.hpp"
#include "lorex/data.hpp"

namespace lorex {

struct CoverageStats {
  std::size_t n = 0;             // n_alpha
  std::vector<std::size_t> n_y;  // per-class counts
  std::vector<double> p_hat;     // empty when n == 0

  bool defined() const { return n > 0; }
  int argmax() const;
};

/// Sorted, deduplicated, NULL-free form of an antecedent.
std::vector<int> canonical(std::span<const int> antecedent);

/// Bitset "true matrix" of atom satisfaction over the train split.
class TrueMatrix {
 public:
  static TrueMatrix build(const AtomPool& pool, const Dataset& dataset);

  std::size_t atoms() const { return popcount_.size(); }
  std::size_t instances() const { return n_; }
  std::size_t words() const { return words_; }
  std::size_t num_classes() const { return class_masks_.size(); }
  const std::uint64_t* row(int atom) const { return bits_.data() + static_cast<std::size_t>(atom) * words_; }
  bool bit(int atom, std::size_t j) const { return (row(atom)[j >> 6] >> (j & 63)) & 1u; }
  std::size_t popcount(int atom) const { return popcount_[static_cast<std::size_t>(atom)]; }
  const std::vector<std::uint64_t>& class_mask(int y) const { return class_masks_[static_cast<std::size_t>(y)]; }
  /// Atoms satisfied by train instance j (NULL excluded), ascending.
  std::span<const int> instance_atoms(std::size_t j) const;

  /// Exact n_alpha and per-class counts. An empty (all-NULL) antecedent covers the whole split.
  CoverageStats coverage(std::span<const int> antecedent) const;
  /// n_alpha only.
  std::size_t count(std::span<const int> antecedent) const;
  /// Writes the intersection row of a canonical antecedent into `out` (words() entries).
  void intersect(std::span<const int> canonical_ids, std::uint64_t* out) const;

 private:
  std::size_t n_ = 0;
  std::size_t words_ = 0;
  std::vector<std::uint64_t> bits_;
  std::vector<std::size_t> popcount_;
  std::vector<std::vector<std::uint64_t>> class_masks_;
  std::vector<std::size_t> class_totals_;
  std::vector<std::size_t> inst_offsets_;
  std::vector<int> inst_atoms_;
};

struct SamplerConfig {
  std::size_t min_df = 200;
  std::size_t per_length = 10000;  // A'
  std::size_t k = 200;             // survivors kept while extending: k * A'
  std::size_t max_len = 4;         // L
  std::uint64_t seed = 0;
};

struct SampledRule {
  std::vector<int> atoms;  // canonical
  CoverageStats stats;
};

struct SampledRuleSet {
  SamplerConfig config;
  std::vector<std::vector<SampledRule>> by_length;  // index l-1
  std::vector<std::size_t> survivors;               // frequent antecedents found per length
  std::vector<std::string> warnings;

  std::size_t size() const;
  std::vector<SampledRule> flatten() const;
};

/// Frequency-thresholded antecedent sampler. Length 1 comes from row popcounts,
/// length 2 from pair counts, longer lengths by extending a k*A' sample of the
/// previous length by one atom. Each length is finally subsampled to A' rules,
/// stratified by majority class in round-robin order.
SampledRuleSet sample_rules(const TrueMatrix& tm, const SamplerConfig& config);

/// Round-robin stratified pick of up to `count` rules by argmax class.
std::vector<SampledRule> stratified_subsample(std::vector<SampledRule> rules, std::size_t count,
                                              std::size_t num_classes, std::uint64_t seed);

/// JSON-Lines: {"atom_ids":[..],"n_alpha":n,"n_alpha_y":[..],"p_hat":[..]} per rule.
void write_rules_jsonl(const std::filesystem::path& path, const SampledRuleSet& rules);
std::vector<SampledRule> read_rules_jsonl(const std::filesystem::path& path);

}  // namespace lorex
