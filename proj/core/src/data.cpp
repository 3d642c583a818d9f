#include "lorex/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

namespace lorex {

int Feature::category_code(std::string_view value) const {
  auto it = std::lower_bound(categories.begin(), categories.end(), value);
  if (it == categories.end() || *it != value) return -1;
  return static_cast<int>(it - categories.begin());
}

int Dataset::feature_index(std::string_view name) const {
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].name == name) return static_cast<int>(i);
  return -1;
}

int Dataset::word_index(std::string_view word) const {
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == word) return static_cast<int>(i);
  return -1;
}

std::size_t Dataset::input_dim() const {
  if (kind == DatasetKind::Text) return vocab.size();
  std::size_t d = 0;
  for (const auto& f : features) d += f.kind == FeatureKind::Numeric ? 1 : f.categories.size();
  return d;
}

void Dataset::encode(const Instance& x, double* out) const {
  const std::size_t d = input_dim();
  std::fill(out, out + d, 0.0);
  if (kind == DatasetKind::Text) {
    double total = 0;
    for (auto [w, c] : x.tokens) total += c;
    if (total > 0)
      for (auto [w, c] : x.tokens) out[w] = c / total;
    return;
  }
  std::size_t off = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& f = features[i];
    if (f.kind == FeatureKind::Numeric) {
      out[off++] = (x.values[i] - f.mean) / f.stddev;
    } else {
      const int code = static_cast<int>(x.values[i]);
      if (code >= 0) out[off + static_cast<std::size_t>(code)] = 1.0;
      off += f.categories.size();
    }
  }
}

std::vector<double> Dataset::encode_rows(const std::vector<std::size_t>& rows) const {
  const std::size_t d = input_dim();
  std::vector<double> out(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r) encode(instances[rows[r]], out.data() + r * d);
  return out;
}

nlohmann::json Dataset::split_manifest() const {
  auto ids = [this](const std::vector<std::size_t>& idx) {
    std::vector<std::int64_t> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(instances[i].id);
    return out;
  };
  return {{"dataset", name},
          {"seed", seed},
          {"sizes", {{"train", splits.train.size()}, {"val", splits.val.size()}, {"test", splits.test.size()}}},
          {"train", ids(splits.train)},
          {"val", ids(splits.val)},
          {"test", ids(splits.test)}};
}

std::vector<double> Dataset::train_prior() const {
  std::vector<double> prior(num_classes(), 0.0);
  for (auto i : splits.train) prior[static_cast<std::size_t>(instances[i].label)] += 1.0;
  for (auto& p : prior) p /= static_cast<double>(std::max<std::size_t>(splits.train.size(), 1));
  return prior;
}

namespace {

DatasetKind parse_kind(const std::string& s) {
  if (s == "tabular") return DatasetKind::Tabular;
  if (s == "text") return DatasetKind::Text;
  throw DataError("kind", "expected \"tabular\" or \"text\", got \"" + s + "\"");
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::optional<double> parse_number(std::string_view s) {
  double v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::vector<std::string> resolve_classes(const std::vector<std::string>& configured,
                                         const std::vector<std::string>& observed) {
  if (!configured.empty()) return configured;
  std::set<std::string> uniq(observed.begin(), observed.end());
  return {uniq.begin(), uniq.end()};
}

int class_index(const std::vector<std::string>& classes, const std::string& label, std::size_t row) {
  auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) {
    throw DataError("row " + std::to_string(row), "unseen label value \"" + label + "\"");
  }
  return static_cast<int>(it - classes.begin());
}

void fill_train_statistics(Dataset& ds, const std::vector<std::vector<std::string>>& raw_categorical) {
  for (std::size_t fi = 0; fi < ds.features.size(); ++fi) {
    auto& f = ds.features[fi];
    if (f.kind == FeatureKind::Numeric) {
      std::vector<double> v;
      v.reserve(ds.splits.train.size());
      for (auto i : ds.splits.train) v.push_back(ds.instances[i].values[fi]);
      std::sort(v.begin(), v.end());
      if (!v.empty()) {
        for (double p : {25.0, 50.0, 75.0}) f.thresholds.push_back(nearest_rank(v, p));
        f.thresholds.erase(std::unique(f.thresholds.begin(), f.thresholds.end()), f.thresholds.end());
        const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        double var = 0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size());
        f.mean = mean;
        f.stddev = var > 0 ? std::sqrt(var) : 1.0;
      }
    } else {
      std::set<std::string> cats;
      for (auto i : ds.splits.train) cats.insert(raw_categorical[fi][i]);
      f.categories.assign(cats.begin(), cats.end());
      for (std::size_t i = 0; i < ds.instances.size(); ++i)
        ds.instances[i].values[fi] = f.category_code(raw_categorical[fi][i]);
    }
  }
}

}  // namespace

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  DatasetConfig c;
  auto require = [&j](const char* key) -> const nlohmann::json& {
    if (!j.contains(key)) throw DataError(key, "missing from dataset config");
    return j.at(key);
  };
  c.name = j.value("name", "dataset");
  c.kind = parse_kind(require("kind").get<std::string>());
  auto resolve = [&base_dir](const std::string& p) -> std::filesystem::path {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  if (j.contains("split")) {
    auto s = j.at("split").get<std::vector<double>>();
    if (s.size() < 2) throw DataError("split", "expected [train, val, test] ratios");
    c.ratios = {s[0], s[1]};
  }
  std::vector<std::string> classes = j.value("classes", std::vector<std::string>{});
  if (c.kind == DatasetKind::Tabular) {
    c.tabular.path = resolve(require("path").get<std::string>());
    c.tabular.label = require("label").get<std::string>();
    c.tabular.numeric = j.value("numeric", std::vector<std::string>{});
    c.tabular.categorical = j.value("categorical", std::vector<std::string>{});
    c.tabular.classes = classes;
  } else {
    c.text.path = resolve(require("path").get<std::string>());
    c.text.vocab_size = j.value("vocab_size", std::size_t{5000});
    if (j.contains("stopwords")) c.text.stopwords = resolve(j.at("stopwords").get<std::string>());
    c.text.classes = classes;
  }
  return c;
}

DatasetConfig DatasetConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string(), "cannot open dataset config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string(), e.what());
  }
  return from_json(j, path.parent_path());
}

std::vector<std::vector<std::string>> parse_csv(std::istream& in) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  char ch;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  while (in.get(ch)) {
    if (quoted) {
      if (ch == '"') {
        if (in.peek() == '"') {
          in.get(ch);
          field += '"';
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (ch == ',') {
      end_field();
    } else if (ch == '\n') {
      end_row();
    } else if (ch == '\r') {
      if (in.peek() == '\n') in.get(ch);
      end_row();
    } else {
      field += ch;
      field_started = true;
    }
  }
  if (quoted) throw DataError("csv", "unterminated quoted field at end of input");
  if (field_started || !row.empty()) end_row();
  return rows;
}

double nearest_rank(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw DataError("percentile", "no values");
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

Splits make_splits(std::size_t n, SplitRatios ratios, std::uint64_t seed) {
  if (ratios.train <= 0 || ratios.val < 0 || ratios.train + ratios.val > 1.0 + 1e-12) {
    throw DataError("split", "ratios must satisfy train > 0, val >= 0, train + val <= 1");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(ratios.train * static_cast<double>(n) + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(ratios.val * static_cast<double>(n) + 1e-9));
  Splits s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
               perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  return s;
}

Dataset load_tabular(const TabularConfig& config, SplitRatios ratios, std::uint64_t seed, std::string name) {
  std::ifstream in(config.path, std::ios::binary);
  if (!in) throw DataError(config.path.string(), "cannot open CSV");
  auto rows = parse_csv(in);
  if (rows.empty()) throw DataError(config.path.string(), "missing header row");
  const auto& header = rows.front();
  auto column = [&header](const std::string& col) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == col) return i;
    throw DataError(col, "column missing from CSV header");
  };

  Dataset ds;
  ds.name = std::move(name);
  ds.kind = DatasetKind::Tabular;
  ds.seed = seed;
  std::vector<std::size_t> cols;
  for (const auto& f : config.numeric) {
    ds.features.push_back({f, FeatureKind::Numeric, {}, {}, 0, 1});
    cols.push_back(column(f));
  }
  for (const auto& f : config.categorical) {
    ds.features.push_back({f, FeatureKind::Categorical, {}, {}, 0, 1});
    cols.push_back(column(f));
  }
  if (ds.features.empty()) throw DataError("features", "no numeric or categorical columns configured");
  const std::size_t label_col = column(config.label);

  const std::size_t n = rows.size() - 1;
  std::vector<std::vector<std::string>> raw_categorical(ds.features.size());
  std::vector<std::string> labels(n);
  ds.instances.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& row = rows[r + 1];
    const std::size_t line = r + 2;
    if (row.size() != header.size()) {
      throw DataError("row " + std::to_string(line), "has " + std::to_string(row.size()) + " fields, header has " +
                                                         std::to_string(header.size()));
    }
    auto& inst = ds.instances[r];
    inst.id = static_cast<std::int64_t>(r);
    inst.values.resize(ds.features.size());
    for (std::size_t fi = 0; fi < ds.features.size(); ++fi) {
      auto cell = trim(row[cols[fi]]);
      const auto& fname = ds.features[fi].name;
      if (cell.empty()) throw DataError(fname, "missing value at row " + std::to_string(line));
      if (ds.features[fi].kind == FeatureKind::Numeric) {
        auto v = parse_number(cell);
        if (!v) throw DataError(fname, "unparseable number \"" + cell + "\" at row " + std::to_string(line));
        inst.values[fi] = *v;
      } else {
        if (raw_categorical[fi].empty()) raw_categorical[fi].resize(n);
        raw_categorical[fi][r] = std::move(cell);
      }
    }
    labels[r] = trim(row[label_col]);
    if (labels[r].empty()) throw DataError(config.label, "missing label at row " + std::to_string(line));
  }
  ds.classes = resolve_classes(config.classes, labels);
  if (ds.classes.size() < 2) throw DataError(config.label, "need at least two classes");
  for (std::size_t r = 0; r < n; ++r) ds.instances[r].label = class_index(ds.classes, labels[r], r + 2);

  ds.splits = make_splits(n, ratios, seed);
  fill_train_statistics(ds, raw_categorical);
  return ds;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> load_stopwords(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string(), "cannot open stopword list");
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    auto w = trim(line);
    if (!w.empty() && w[0] != '#') words.push_back(w);
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

Dataset load_text(const TextConfig& config, SplitRatios ratios, std::uint64_t seed, std::string name) {
  std::ifstream in(config.path);
  if (!in) throw DataError(config.path.string(), "cannot open JSON-Lines corpus");
  std::vector<std::vector<std::string>> docs;
  std::vector<std::string> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(lineno), e.what());
    }
    if (!j.contains("text") || !j["text"].is_string()) {
      throw DataError("line " + std::to_string(lineno), "field \"text\" missing or not a string");
    }
    if (!j.contains("label")) throw DataError("line " + std::to_string(lineno), "field \"label\" missing");
    docs.push_back(tokenize(j["text"].get<std::string>()));
    labels.push_back(j["label"].is_string() ? j["label"].get<std::string>() : j["label"].dump());
  }
  if (docs.empty()) throw DataError(config.path.string(), "empty corpus");

  Dataset ds;
  ds.name = std::move(name);
  ds.kind = DatasetKind::Text;
  ds.seed = seed;
  ds.classes = resolve_classes(config.classes, labels);
  if (ds.classes.size() < 2) throw DataError("label", "need at least two classes");
  ds.splits = make_splits(docs.size(), ratios, seed);

  std::vector<std::string> stop;
  if (!config.stopwords.empty()) stop = load_stopwords(config.stopwords);
  std::unordered_map<std::string, std::size_t> freq;
  for (auto i : ds.splits.train)
    for (const auto& w : docs[i])
      if (!std::binary_search(stop.begin(), stop.end(), w)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) { return a.second != b.second ? a.second > b.second : a.first < b.first; });
  if (ranked.size() > config.vocab_size) ranked.resize(config.vocab_size);
  std::unordered_map<std::string, int> index;
  for (const auto& [w, c] : ranked) {
    index.emplace(w, static_cast<int>(ds.vocab.size()));
    ds.vocab.push_back(w);
  }

  ds.instances.resize(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    auto& inst = ds.instances[i];
    inst.id = static_cast<std::int64_t>(i);
    inst.length = static_cast<int>(docs[i].size());
    inst.label = class_index(ds.classes, labels[i], i + 1);
    std::map<int, int> counts;
    for (const auto& w : docs[i]) {
      auto it = index.find(w);
      if (it != index.end()) ++counts[it->second];
    }
    inst.tokens.assign(counts.begin(), counts.end());
    if (inst.tokens.empty()) ds.empty_documents.push_back(inst.id);
  }
  return ds;
}

Dataset load_dataset(const DatasetConfig& config, std::uint64_t seed) {
  if (config.kind == DatasetKind::Tabular) return load_tabular(config.tabular, config.ratios, seed, config.name);
  return load_text(config.text, config.ratios, seed, config.name);
}

std::vector<std::size_t> inject_symmetric_noise(Dataset& dataset, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 0.5)) {
    throw DataError("noise_ratio", "must lie in [0, 0.5], got " + std::to_string(ratio));
  }
  const std::size_t n = dataset.splits.train.size();
  const auto flips = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (flips == 0) return {};
  std::vector<std::size_t> order = dataset.splits.train;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < flips; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }
  order.resize(flips);
  const int k = static_cast<int>(dataset.num_classes());
  std::uniform_int_distribution<int> other(0, k - 2);
  for (auto idx : order) {
    auto& label = dataset.instances[idx].label;
    const int draw = other(rng);
    label = draw >= label ? draw + 1 : draw;
  }
  std::sort(order.begin(), order.end());
  return order;
}

Instance instance_from_json(const Dataset& dataset, const nlohmann::json& fields) {
  if (!fields.is_object()) throw DataError("instance", "expected a JSON object");
  Instance inst;
  inst.id = -1;
  if (dataset.kind == DatasetKind::Text) {
    if (!fields.contains("text") || !fields["text"].is_string()) {
      throw DataError("text", "required string field");
    }
    auto words = tokenize(fields["text"].get<std::string>());
    inst.length = static_cast<int>(words.size());
    std::map<int, int> counts;
    std::unordered_map<std::string_view, int> index;
    for (std::size_t i = 0; i < dataset.vocab.size(); ++i) index.emplace(dataset.vocab[i], static_cast<int>(i));
    for (const auto& w : words) {
      auto it = index.find(w);
      if (it != index.end()) ++counts[it->second];
    }
    inst.tokens.assign(counts.begin(), counts.end());
    return inst;
  }
  inst.values.resize(dataset.features.size());
  for (std::size_t fi = 0; fi < dataset.features.size(); ++fi) {
    const auto& f = dataset.features[fi];
    if (!fields.contains(f.name)) throw DataError(f.name, "required field missing");
    const auto& v = fields.at(f.name);
    if (f.kind == FeatureKind::Numeric) {
      std::optional<double> x;
      if (v.is_number()) x = v.get<double>();
      else if (v.is_string()) x = parse_number(trim(v.get<std::string>()));
      if (!x || !std::isfinite(*x)) throw DataError(f.name, "expected a finite number");
      inst.values[fi] = *x;
    } else {
      if (!v.is_string()) throw DataError(f.name, "expected a string category");
      inst.values[fi] = f.category_code(trim(v.get<std::string>()));
    }
  }
  return inst;
}

}  // namespace lorex
