#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorex/data.hpp"

namespace lorex {

enum class AtomKind { Null, WordExists, CategoricalEquals, NumericGe, NumericLt };

std::string_view to_string(AtomKind kind);

struct Atom {
  int id = 0;
  AtomKind kind = AtomKind::Null;
  int feature = -1;   // feature index (tabular) or vocabulary id (text)
  int category = -1;  // categorical code
  double threshold = 0.0;
  std::string display;
  std::size_t coverage = 0;  // satisfying train instances
};

inline constexpr int kNullAtom = 0;

struct PoolConfig {
  std::size_t num_atoms = 5000;  // text: word atoms kept (most frequent first)
};

/// Candidate atom set. Id 0 is NULL, satisfied by every instance.
class AtomPool {
 public:
  static AtomPool build(const Dataset& dataset, const PoolConfig& config = {});

  std::size_t size() const { return atoms_.size(); }
  const Atom& operator[](int id) const { return atoms_.at(static_cast<std::size_t>(id)); }
  const std::vector<Atom>& atoms() const { return atoms_; }
  DatasetKind kind() const { return kind_; }

  bool satisfies(int atom_id, const Instance& x) const;
  /// Every atom the instance satisfies, ascending, NULL included.
  std::vector<int> satisfied(const Instance& x) const;
  /// Ids of atoms of one feature (tabular) or word (text).
  const std::vector<int>& feature_atoms(int feature) const;
  std::optional<int> find(std::string_view display) const;
  /// Case-insensitive substring search over display strings, NULL excluded.
  std::vector<int> search(std::string_view query, std::size_t limit = 50) const;

  /// Keeps only the tightest of same-feature, same-direction numeric atoms; order preserved.
  std::vector<int> strip_redundant(std::span<const int> ids) const;
  /// True when some numeric pair (>= t, < t') with t >= t' on one feature is present.
  bool has_conflict(std::span<const int> ids) const;

  /// Mean train representation per atom; NULL and zero-coverage atoms stay zero.
  /// `reps` holds one row of width `dim` per train instance, in split order.
  void init_embeddings(const Dataset& dataset, std::span<const double> reps, std::size_t dim);
  const std::vector<double>& embeddings() const { return embeddings_; }
  std::size_t embedding_dim() const { return dim_; }
  void set_embeddings(std::vector<double> values, std::size_t dim);

  nlohmann::json to_json() const;
  /// Rebuilds a pool from its JSON form; predicates are re-resolved against `dataset`.
  static AtomPool from_json(const nlohmann::json& j, const Dataset& dataset);

 private:
  void check_schema(const Instance& x) const;
  void index();

  DatasetKind kind_ = DatasetKind::Tabular;
  std::size_t num_features_ = 0;
  std::vector<Atom> atoms_;
  std::vector<std::vector<int>> by_feature_;
  std::unordered_map<int, int> word_atom_;  // vocab id -> atom id
  std::unordered_map<std::string, int> by_display_;
  std::vector<double> embeddings_;
  std::size_t dim_ = 0;
};

/// Shortest decimal form that round-trips.
std::string format_number(double v);

}  // namespace lorex
