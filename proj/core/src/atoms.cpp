#include "lorex/atoms.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

namespace lorex {

std::string_view to_string(AtomKind kind) {
  switch (kind) {
    case AtomKind::Null: return "null";
    case AtomKind::WordExists: return "word";
    case AtomKind::CategoricalEquals: return "categorical";
    case AtomKind::NumericGe: return "ge";
    case AtomKind::NumericLt: return "lt";
  }
  return "unknown";
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

namespace {

AtomKind parse_atom_kind(const std::string& s) {
  for (auto k : {AtomKind::Null, AtomKind::WordExists, AtomKind::CategoricalEquals, AtomKind::NumericGe,
                 AtomKind::NumericLt})
    if (to_string(k) == s) return k;
  throw DataError("kind", "unknown atom kind \"" + s + "\"");
}

bool is_numeric(AtomKind k) { return k == AtomKind::NumericGe || k == AtomKind::NumericLt; }

}  // namespace

AtomPool AtomPool::build(const Dataset& dataset, const PoolConfig& config) {
  AtomPool pool;
  pool.kind_ = dataset.kind;
  pool.atoms_.push_back({kNullAtom, AtomKind::Null, -1, -1, 0.0, "NULL", dataset.train_size()});
  auto push = [&pool](Atom a) {
    a.id = static_cast<int>(pool.atoms_.size());
    pool.atoms_.push_back(std::move(a));
  };
  if (dataset.kind == DatasetKind::Text) {
    pool.num_features_ = dataset.vocab.size();
    const std::size_t n = std::min(config.num_atoms, dataset.vocab.size());
    for (std::size_t w = 0; w < n; ++w) push({0, AtomKind::WordExists, static_cast<int>(w), -1, 1.0, dataset.vocab[w], 0});
  } else {
    pool.num_features_ = dataset.features.size();
    for (std::size_t fi = 0; fi < dataset.features.size(); ++fi) {
      const auto& f = dataset.features[fi];
      const int feat = static_cast<int>(fi);
      if (f.kind == FeatureKind::Categorical) {
        for (std::size_t c = 0; c < f.categories.size(); ++c)
          push({0, AtomKind::CategoricalEquals, feat, static_cast<int>(c), 0.0, f.name + " == " + f.categories[c], 0});
      } else {
        for (double t : f.thresholds) {
          push({0, AtomKind::NumericGe, feat, -1, t, f.name + " ≥ " + format_number(t), 0});
          push({0, AtomKind::NumericLt, feat, -1, t, f.name + " < " + format_number(t), 0});
        }
      }
    }
  }
  if (pool.atoms_.size() <= 1) throw DataError("atoms", "pool is empty after construction");
  pool.index();
  for (auto i : dataset.splits.train)
    for (int a : pool.satisfied(dataset.instances[i]))
      if (a != kNullAtom) ++pool.atoms_[static_cast<std::size_t>(a)].coverage;
  return pool;
}

void AtomPool::index() {
  by_feature_.assign(num_features_, {});
  word_atom_.clear();
  by_display_.clear();
  for (const auto& a : atoms_) {
    if (a.feature >= 0) by_feature_[static_cast<std::size_t>(a.feature)].push_back(a.id);
    if (a.kind == AtomKind::WordExists) word_atom_.emplace(a.feature, a.id);
    by_display_.emplace(a.display, a.id);
  }
}

void AtomPool::check_schema(const Instance& x) const {
  if (kind_ == DatasetKind::Tabular && x.values.size() != num_features_) {
    throw DataError("instance", "has " + std::to_string(x.values.size()) + " feature values, pool expects " +
                                    std::to_string(num_features_));
  }
}

bool AtomPool::satisfies(int atom_id, const Instance& x) const {
  check_schema(x);
  const auto& a = (*this)[atom_id];
  switch (a.kind) {
    case AtomKind::Null: return true;
    case AtomKind::WordExists: {
      auto it = std::lower_bound(x.tokens.begin(), x.tokens.end(), std::pair{a.feature, 0});
      return it != x.tokens.end() && it->first == a.feature && it->second >= static_cast<int>(a.threshold);
    }
    case AtomKind::CategoricalEquals: return static_cast<int>(x.values[static_cast<std::size_t>(a.feature)]) == a.category;
    case AtomKind::NumericGe: return x.values[static_cast<std::size_t>(a.feature)] >= a.threshold;
    case AtomKind::NumericLt: return x.values[static_cast<std::size_t>(a.feature)] < a.threshold;
  }
  return false;
}

std::vector<int> AtomPool::satisfied(const Instance& x) const {
  check_schema(x);
  std::vector<int> out = {kNullAtom};
  if (kind_ == DatasetKind::Text) {
    for (auto [w, c] : x.tokens) {
      auto it = word_atom_.find(w);
      if (it != word_atom_.end() && c >= static_cast<int>(atoms_[static_cast<std::size_t>(it->second)].threshold))
        out.push_back(it->second);
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  for (std::size_t i = 1; i < atoms_.size(); ++i)
    if (satisfies(static_cast<int>(i), x)) out.push_back(static_cast<int>(i));
  return out;
}

const std::vector<int>& AtomPool::feature_atoms(int feature) const {
  return by_feature_.at(static_cast<std::size_t>(feature));
}

std::optional<int> AtomPool::find(std::string_view display) const {
  auto it = by_display_.find(std::string(display));
  if (it == by_display_.end()) return std::nullopt;
  return it->second;
}

std::vector<int> AtomPool::search(std::string_view query, std::size_t limit) const {
  auto lower = [](std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  const auto q = lower(query);
  std::vector<int> out;
  for (std::size_t i = 1; i < atoms_.size() && out.size() < limit; ++i)
    if (lower(atoms_[i].display).find(q) != std::string::npos) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> AtomPool::strip_redundant(std::span<const int> ids) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& a = (*this)[ids[i]];
    bool dominated = false;
    if (is_numeric(a.kind)) {
      for (std::size_t j = 0; j < ids.size() && !dominated; ++j) {
        if (i == j) continue;
        const auto& b = (*this)[ids[j]];
        if (b.kind != a.kind || b.feature != a.feature) continue;
        const bool tighter = a.kind == AtomKind::NumericGe ? b.threshold > a.threshold : b.threshold < a.threshold;
        // Equal thresholds: keep the first occurrence.
        dominated = tighter || (b.threshold == a.threshold && j < i);
      }
    }
    if (!dominated) out.push_back(ids[i]);
  }
  return out;
}

bool AtomPool::has_conflict(std::span<const int> ids) const {
  for (int x : ids)
    for (int y : ids) {
      const auto& ge = (*this)[x];
      const auto& lt = (*this)[y];
      if (ge.kind == AtomKind::NumericGe && lt.kind == AtomKind::NumericLt && ge.feature == lt.feature &&
          ge.threshold >= lt.threshold)
        return true;
    }
  return false;
}

void AtomPool::init_embeddings(const Dataset& dataset, std::span<const double> reps, std::size_t dim) {
  const std::size_t n = dataset.train_size();
  if (reps.size() != n * dim) {
    throw DataError("embeddings", "expected " + std::to_string(n) + " x " + std::to_string(dim) +
                                      " train representations, got " + std::to_string(reps.size()) + " values");
  }
  dim_ = dim;
  embeddings_.assign(atoms_.size() * dim, 0.0);
  std::vector<std::size_t> counts(atoms_.size(), 0);
  for (std::size_t j = 0; j < n; ++j) {
    const double* r = reps.data() + j * dim;
    for (int a : satisfied(dataset.train(j))) {
      if (a == kNullAtom) continue;
      double* e = embeddings_.data() + static_cast<std::size_t>(a) * dim;
      for (std::size_t c = 0; c < dim; ++c) e[c] += r[c];
      ++counts[static_cast<std::size_t>(a)];
    }
  }
  for (std::size_t a = 1; a < atoms_.size(); ++a) {
    if (counts[a] == 0) continue;
    const double inv = 1.0 / static_cast<double>(counts[a]);
    for (std::size_t c = 0; c < dim; ++c) embeddings_[a * dim + c] *= inv;
  }
}

void AtomPool::set_embeddings(std::vector<double> values, std::size_t dim) {
  if (values.size() != atoms_.size() * dim) {
    throw DataError("embeddings", "expected " + std::to_string(atoms_.size() * dim) + " values");
  }
  embeddings_ = std::move(values);
  dim_ = dim;
}

nlohmann::json AtomPool::to_json() const {
  nlohmann::json atoms = nlohmann::json::array();
  for (const auto& a : atoms_) {
    nlohmann::json j = {{"id", a.id}, {"kind", to_string(a.kind)}, {"display", a.display}, {"coverage", a.coverage}};
    if (a.feature >= 0) j["feature"] = a.feature;
    if (a.kind == AtomKind::CategoricalEquals) j["category"] = a.category;
    if (is_numeric(a.kind) || a.kind == AtomKind::WordExists) j["threshold"] = a.threshold;
    atoms.push_back(std::move(j));
  }
  return {{"format", "lorex-atoms"},
          {"version", 1},
          {"kind", kind_ == DatasetKind::Text ? "text" : "tabular"},
          {"num_features", num_features_},
          {"atoms", std::move(atoms)}};
}

AtomPool AtomPool::from_json(const nlohmann::json& j, const Dataset& dataset) {
  if (j.value("format", "") != "lorex-atoms") throw DataError("atoms", "not a lorex atom pool");
  AtomPool pool;
  pool.kind_ = dataset.kind;
  pool.num_features_ = j.at("num_features").get<std::size_t>();
  const std::size_t expected = dataset.kind == DatasetKind::Text ? dataset.vocab.size() : dataset.features.size();
  if (pool.num_features_ != expected) throw DataError("atoms", "pool schema does not match the dataset");
  for (const auto& a : j.at("atoms")) {
    Atom atom;
    atom.id = a.at("id").get<int>();
    atom.kind = parse_atom_kind(a.at("kind").get<std::string>());
    atom.display = a.at("display").get<std::string>();
    atom.coverage = a.at("coverage").get<std::size_t>();
    atom.feature = a.value("feature", -1);
    atom.category = a.value("category", -1);
    atom.threshold = a.value("threshold", 0.0);
    if (atom.id != static_cast<int>(pool.atoms_.size())) throw DataError("atoms", "ids must be dense and ordered");
    pool.atoms_.push_back(std::move(atom));
  }
  if (pool.atoms_.empty() || pool.atoms_[0].kind != AtomKind::Null) throw DataError("atoms", "atom 0 must be NULL");
  pool.index();
  return pool;
}

}  // namespace lorex
