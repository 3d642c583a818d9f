#include "lorex/coverage.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <random>

#include "lorex/seed.hpp"

namespace lorex {

int CoverageStats::argmax() const {
  if (p_hat.empty()) return -1;
  return static_cast<int>(std::max_element(p_hat.begin(), p_hat.end()) - p_hat.begin());
}

std::vector<int> canonical(std::span<const int> antecedent) {
  std::vector<int> ids;
  ids.reserve(antecedent.size());
  for (int a : antecedent)
    if (a != kNullAtom) ids.push_back(a);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

TrueMatrix TrueMatrix::build(const AtomPool& pool, const Dataset& dataset) {
  TrueMatrix tm;
  tm.n_ = dataset.train_size();
  tm.words_ = (tm.n_ + 63) / 64;
  const std::size_t m = pool.size();
  tm.bits_.assign(m * tm.words_, 0);
  tm.popcount_.assign(m, 0);
  tm.class_masks_.assign(dataset.num_classes(), std::vector<std::uint64_t>(tm.words_, 0));
  tm.class_totals_.assign(dataset.num_classes(), 0);
  tm.inst_offsets_.assign(tm.n_ + 1, 0);
  for (std::size_t j = 0; j < tm.n_; ++j) {
    const auto& x = dataset.train(j);
    const std::uint64_t bit = std::uint64_t{1} << (j & 63);
    const std::size_t w = j >> 6;
    tm.class_masks_[static_cast<std::size_t>(x.label)][w] |= bit;
    ++tm.class_totals_[static_cast<std::size_t>(x.label)];
    for (int a : pool.satisfied(x)) {
      tm.bits_[static_cast<std::size_t>(a) * tm.words_ + w] |= bit;
      ++tm.popcount_[static_cast<std::size_t>(a)];
      if (a != kNullAtom) tm.inst_atoms_.push_back(a);
    }
    tm.inst_offsets_[j + 1] = tm.inst_atoms_.size();
  }
  return tm;
}

std::span<const int> TrueMatrix::instance_atoms(std::size_t j) const {
  return {inst_atoms_.data() + inst_offsets_[j], inst_offsets_[j + 1] - inst_offsets_[j]};
}

void TrueMatrix::intersect(std::span<const int> ids, std::uint64_t* out) const {
  if (ids.empty()) {
    std::copy_n(row(kNullAtom), words_, out);
    return;
  }
  const std::uint64_t* first = row(ids[0]);
  std::copy_n(first, words_, out);
  for (std::size_t i = 1; i < ids.size(); ++i) {
    const std::uint64_t* r = row(ids[i]);
    for (std::size_t w = 0; w < words_; ++w) out[w] &= r[w];
  }
}

namespace {

// Streams the AND of up to four rows without a scratch buffer.
template <class Body>
void for_each_word(const TrueMatrix& tm, std::span<const int> ids, Body body) {
  const std::size_t words = tm.words();
  switch (ids.size()) {
    case 1: {
      const auto* a = tm.row(ids[0]);
      for (std::size_t w = 0; w < words; ++w) body(w, a[w]);
      return;
    }
    case 2: {
      const auto *a = tm.row(ids[0]), *b = tm.row(ids[1]);
      for (std::size_t w = 0; w < words; ++w) body(w, a[w] & b[w]);
      return;
    }
    case 3: {
      const auto *a = tm.row(ids[0]), *b = tm.row(ids[1]), *c = tm.row(ids[2]);
      for (std::size_t w = 0; w < words; ++w) body(w, a[w] & b[w] & c[w]);
      return;
    }
    case 4: {
      const auto *a = tm.row(ids[0]), *b = tm.row(ids[1]), *c = tm.row(ids[2]), *d = tm.row(ids[3]);
      for (std::size_t w = 0; w < words; ++w) body(w, a[w] & b[w] & c[w] & d[w]);
      return;
    }
    default: {
      std::vector<const std::uint64_t*> rows;
      for (int id : ids) rows.push_back(tm.row(id));
      for (std::size_t w = 0; w < words; ++w) {
        std::uint64_t x = rows[0][w];
        for (std::size_t i = 1; i < rows.size(); ++i) x &= rows[i][w];
        body(w, x);
      }
    }
  }
}

void check_ids(const TrueMatrix& tm, std::span<const int> ids) {
  for (int a : ids)
    if (a < 0 || static_cast<std::size_t>(a) >= tm.atoms()) {
      throw DataError("antecedent", "atom id " + std::to_string(a) + " outside pool of " + std::to_string(tm.atoms()));
    }
}

}  // namespace

CoverageStats TrueMatrix::coverage(std::span<const int> antecedent) const {
  check_ids(*this, antecedent);
  const auto ids = canonical(antecedent);
  CoverageStats s;
  const std::size_t k = class_masks_.size();
  s.n_y.assign(k, 0);
  if (ids.empty()) {
    s.n = n_;
    s.n_y = class_totals_;
  } else if (k == 2) {
    const auto* pos = class_masks_[1].data();
    std::size_t n = 0, n1 = 0;
    for_each_word(*this, ids, [&](std::size_t w, std::uint64_t x) {
      n += static_cast<std::size_t>(std::popcount(x));
      n1 += static_cast<std::size_t>(std::popcount(x & pos[w]));
    });
    s.n = n;
    s.n_y = {n - n1, n1};
  } else {
    for_each_word(*this, ids, [&](std::size_t w, std::uint64_t x) {
      s.n += static_cast<std::size_t>(std::popcount(x));
      for (std::size_t y = 0; y < k; ++y) s.n_y[y] += static_cast<std::size_t>(std::popcount(x & class_masks_[y][w]));
    });
  }
  if (s.n > 0) {
    s.p_hat.resize(k);
    for (std::size_t y = 0; y < k; ++y) s.p_hat[y] = static_cast<double>(s.n_y[y]) / static_cast<double>(s.n);
  }
  return s;
}

std::size_t TrueMatrix::count(std::span<const int> antecedent) const {
  check_ids(*this, antecedent);
  const auto ids = canonical(antecedent);
  if (ids.empty()) return n_;
  std::size_t n = 0;
  for_each_word(*this, ids, [&n](std::size_t, std::uint64_t x) { n += static_cast<std::size_t>(std::popcount(x)); });
  return n;
}

std::size_t SampledRuleSet::size() const {
  std::size_t n = 0;
  for (const auto& l : by_length) n += l.size();
  return n;
}

std::vector<SampledRule> SampledRuleSet::flatten() const {
  std::vector<SampledRule> out;
  for (const auto& l : by_length) out.insert(out.end(), l.begin(), l.end());
  return out;
}

namespace {

/// Reservoir of fixed-length keys (Algorithm R).
class Reservoir {
 public:
  Reservoir(std::size_t len, std::size_t capacity, std::uint64_t seed) : len_(len), cap_(capacity), rng_(seed) {}

  void offer(std::span<const int> prefix, int last) {
    ++seen_;
    if (kept() < cap_) {
      keys_.insert(keys_.end(), prefix.begin(), prefix.end());
      keys_.push_back(last);
      return;
    }
    std::uniform_int_distribution<std::size_t> pick(0, seen_ - 1);
    const std::size_t slot = pick(rng_);
    if (slot < cap_) {
      std::copy(prefix.begin(), prefix.end(), keys_.begin() + static_cast<std::ptrdiff_t>(slot * len_));
      keys_[slot * len_ + len_ - 1] = last;
    }
  }
  std::size_t kept() const { return keys_.size() / len_; }
  std::size_t seen() const { return seen_; }
  std::span<const int> key(std::size_t i) const { return {keys_.data() + i * len_, len_}; }

 private:
  std::size_t len_, cap_;
  std::mt19937_64 rng_;
  std::size_t seen_ = 0;
  std::vector<int> keys_;
};

/// Extends every key in `level` by one frequent atom larger than its last id and
/// offers the frequent results to `out`. Counting goes through the covered
/// instances when that is cheaper than full-row intersections.
void extend_level(const TrueMatrix& tm, const Reservoir& level, const std::vector<int>& frequent,
                  const std::vector<char>& is_frequent, std::size_t min_df, Reservoir& out) {
  const std::size_t words = tm.words();
  std::vector<std::uint64_t> scratch(words);
  std::vector<std::uint32_t> counter(tm.atoms(), 0);
  std::vector<int> touched;
  std::size_t total_sat = 0;
  for (std::size_t j = 0; j < tm.instances(); ++j) total_sat += tm.instance_atoms(j).size();
  const double avg_sat = tm.instances() ? static_cast<double>(total_sat) / static_cast<double>(tm.instances()) : 0.0;

  for (std::size_t r = 0; r < level.kept(); ++r) {
    const auto key = level.key(r);
    const int last = key.back();
    auto begin = std::upper_bound(frequent.begin(), frequent.end(), last);
    const auto candidates = static_cast<std::size_t>(frequent.end() - begin);
    if (candidates == 0) continue;
    tm.intersect(key, scratch.data());
    std::size_t n_r = 0;
    for (std::size_t w = 0; w < words; ++w) n_r += static_cast<std::size_t>(std::popcount(scratch[w]));
    if (n_r < min_df) continue;

    if (static_cast<double>(n_r) * avg_sat < static_cast<double>(candidates * words)) {
      touched.clear();
      for (std::size_t w = 0; w < words; ++w) {
        std::uint64_t bits = scratch[w];
        while (bits) {
          const std::size_t j = (w << 6) + static_cast<std::size_t>(std::countr_zero(bits));
          bits &= bits - 1;
          for (int a : tm.instance_atoms(j))
            if (a > last && is_frequent[static_cast<std::size_t>(a)] && counter[static_cast<std::size_t>(a)]++ == 0)
              touched.push_back(a);
        }
      }
      std::sort(touched.begin(), touched.end());
      for (int a : touched) {
        if (counter[static_cast<std::size_t>(a)] >= min_df) out.offer(key, a);
        counter[static_cast<std::size_t>(a)] = 0;
      }
    } else {
      for (auto it = begin; it != frequent.end(); ++it) {
        const auto* row = tm.row(*it);
        std::size_t c = 0;
        for (std::size_t w = 0; w < words; ++w) c += static_cast<std::size_t>(std::popcount(scratch[w] & row[w]));
        if (c >= min_df) out.offer(key, *it);
      }
    }
  }
}

}  // namespace

std::vector<SampledRule> stratified_subsample(std::vector<SampledRule> rules, std::size_t count,
                                              std::size_t num_classes, std::uint64_t seed) {
  std::vector<std::vector<SampledRule>> strata(num_classes);
  for (auto& r : rules) {
    const int y = std::max(r.stats.argmax(), 0);
    strata[static_cast<std::size_t>(y)].push_back(std::move(r));
  }
  std::mt19937_64 rng(seed);
  for (auto& s : strata) std::shuffle(s.begin(), s.end(), rng);
  std::vector<SampledRule> out;
  std::vector<std::size_t> next(num_classes, 0);
  bool progress = true;
  while (out.size() < count && progress) {
    progress = false;
    for (std::size_t y = 0; y < num_classes && out.size() < count; ++y) {
      if (next[y] < strata[y].size()) {
        out.push_back(std::move(strata[y][next[y]++]));
        progress = true;
      }
    }
  }
  return out;
}

SampledRuleSet sample_rules(const TrueMatrix& tm, const SamplerConfig& config) {
  if (config.min_df < 1) throw DataError("min_df", "must be at least 1");
  if (config.k < 1) throw DataError("k", "must be at least 1");
  if (config.max_len < 1) throw DataError("max_len", "must be at least 1");
  if (config.per_length < 1) throw DataError("per_length", "must be at least 1");

  SampledRuleSet set;
  set.config = config;
  std::vector<int> frequent;
  std::vector<char> is_frequent(tm.atoms(), 0);
  for (std::size_t a = 1; a < tm.atoms(); ++a)
    if (tm.popcount(static_cast<int>(a)) >= config.min_df) {
      frequent.push_back(static_cast<int>(a));
      is_frequent[a] = 1;
    }

  const std::size_t capacity = config.k * config.per_length;
  Reservoir level(1, capacity, derive_seed(config.seed, "sampler.level", 1));
  for (int a : frequent) level.offer({}, a);

  for (std::size_t len = 1; len <= config.max_len; ++len) {
    if (len > 1) {
      Reservoir next(len, capacity, derive_seed(config.seed, "sampler.level", len));
      extend_level(tm, level, frequent, is_frequent, config.min_df, next);
      level = std::move(next);
    }
    set.survivors.push_back(level.seen());
    std::vector<SampledRule> rules;
    rules.reserve(level.kept());
    for (std::size_t i = 0; i < level.kept(); ++i) {
      auto key = level.key(i);
      rules.push_back({std::vector<int>(key.begin(), key.end()), tm.coverage(key)});
    }
    if (rules.size() < config.per_length) {
      set.warnings.push_back("length " + std::to_string(len) + ": only " + std::to_string(rules.size()) +
                             " antecedents reach min_df=" + std::to_string(config.min_df) + " (wanted " +
                             std::to_string(config.per_length) + ")");
    }
    set.by_length.push_back(
        stratified_subsample(std::move(rules), config.per_length, tm.num_classes(), derive_seed(config.seed, "sampler.subsample", len)));
  }
  return set;
}

void write_rules_jsonl(const std::filesystem::path& path, const SampledRuleSet& rules) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& level : rules.by_length)
    for (const auto& r : level) {
      nlohmann::json j = {{"atom_ids", r.atoms}, {"n_alpha", r.stats.n}, {"n_alpha_y", r.stats.n_y}, {"p_hat", r.stats.p_hat}};
      out << j.dump() << '\n';
    }
}

std::vector<SampledRule> read_rules_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string(), "cannot open rule file");
  std::vector<SampledRule> rules;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      SampledRule r;
      r.atoms = j.at("atom_ids").get<std::vector<int>>();
      r.stats.n = j.at("n_alpha").get<std::size_t>();
      r.stats.n_y = j.at("n_alpha_y").get<std::vector<std::size_t>>();
      r.stats.p_hat = j.at("p_hat").get<std::vector<double>>();
      rules.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno), e.what());
    }
  }
  return rules;
}

}  // namespace lorex
