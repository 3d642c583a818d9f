#include "lorex/explain.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "lorex/diff/ops.hpp"
#include "lorex/seed.hpp"

namespace lorex {

using diff::Tensor;

nlohmann::json Explanation::to_json(const Dataset& dataset) const {
  return {{"instance_id", instance_id},
          {"atoms", atoms},
          {"atom_ids", atom_ids},
          {"predicted_class", dataset.classes.at(static_cast<std::size_t>(predicted_class))},
          {"predicted_index", predicted_class},
          {"confidence", confidence},
          {"distribution", distribution},
          {"coverage_n", coverage_n},
          {"coverage_pct", coverage_pct},
          {"null_count", null_count}};
}

Explainer::Explainer(std::shared_ptr<const SelorModel> model, std::shared_ptr<const Dataset> dataset)
    : model_(std::move(model)), dataset_(std::move(dataset)) {
  matrix_ = TrueMatrix::build(model_->pool(), *dataset_);
}

HardPrior Explainer::default_prior() const {
  HardPrior p;
  p.max_len = model_->estimator().config().max_len;
  return p;
}

Explanation Explainer::finish(std::int64_t id, std::vector<int> raw, std::span<const double> dist) const {
  const auto& pool = model_->pool();
  Explanation e;
  e.instance_id = id;
  e.null_count = static_cast<std::size_t>(std::count(raw.begin(), raw.end(), kNullAtom));
  std::vector<int> kept;
  for (int a : raw)
    if (a != kNullAtom) kept.push_back(a);
  e.atom_ids = pool.strip_redundant(kept);
  for (int a : e.atom_ids) e.atoms.push_back(pool[a].display);
  e.raw_ids = std::move(raw);
  e.distribution.assign(dist.begin(), dist.end());
  e.predicted_class = static_cast<int>(std::max_element(dist.begin(), dist.end()) - dist.begin());
  e.confidence = dist[static_cast<std::size_t>(e.predicted_class)];
  e.coverage_n = matrix_.count(e.atom_ids);
  e.coverage_pct = matrix_.instances() ? 100.0 * static_cast<double>(e.coverage_n) / static_cast<double>(matrix_.instances()) : 0.0;
  return e;
}

Explanation Explainer::explain(const Instance& x, const HardPrior& prior) const {
  const std::size_t dim = dataset_->input_dim();
  std::vector<double> row(dim);
  dataset_->encode(x, row.data());
  auto out = model_->forward(Tensor::constant({1, dim}, std::move(row)), {model_->pool().satisfied(x)}, prior,
                             Decode::Greedy, nullptr);
  return finish(x.id, out.generation.ids[0], out.smoothed.data());
}

std::vector<Explanation> Explainer::explain_rows(const std::vector<std::size_t>& rows, const HardPrior& prior) const {
  std::vector<Explanation> out;
  out.reserve(rows.size());
  const std::size_t k = model_->num_classes();
  constexpr std::size_t chunk = 512;
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    std::vector<std::size_t> part(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                  rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + chunk)));
    auto o = model_->forward(*dataset_, part, prior, Decode::Greedy, nullptr);
    for (std::size_t i = 0; i < part.size(); ++i)
      out.push_back(finish(dataset_->instances[part[i]].id, std::move(o.generation.ids[i]),
                           o.smoothed.data().subspan(i * k, k)));
  }
  return out;
}

const std::vector<std::size_t>& Explainer::split_rows(const std::string& split) const {
  if (split == "train") return dataset_->splits.train;
  if (split == "val") return dataset_->splits.val;
  if (split == "test") return dataset_->splits.test;
  throw std::invalid_argument("unknown split '" + split + "' (expected train, val or test)");
}

const std::vector<Explanation>& Explainer::baseline(const std::string& split) const {
  const auto& rows = split_rows(split);
  std::lock_guard lock(cache_mutex_);
  auto it = cache_.find(split);
  if (it == cache_.end()) it = cache_.emplace(split, explain_rows(rows, default_prior())).first;
  return it->second;
}

std::vector<int> kmeans(std::span<const double> points, std::size_t dim, std::size_t k, std::uint64_t seed,
                        std::size_t max_iter) {
  if (dim == 0 || points.size() % dim != 0) throw std::invalid_argument("kmeans: points do not match dimension");
  const std::size_t n = points.size() / dim;
  if (k == 0) throw std::invalid_argument("kmeans: k must be at least 1");
  if (k > n) {
    throw std::invalid_argument("kmeans: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " points");
  }
  auto dist2 = [&](std::size_t i, const double* c) {
    double s = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = points[i * dim + j] - c[j];
      s += d * d;
    }
    return s;
  };
  std::mt19937_64 rng(derive_seed(seed, "kmeans"));
  std::vector<double> centers;
  centers.reserve(k * dim);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  const std::size_t f = first(rng);
  centers.insert(centers.end(), points.begin() + static_cast<std::ptrdiff_t>(f * dim),
                 points.begin() + static_cast<std::ptrdiff_t>((f + 1) * dim));
  std::vector<double> best(n);
  for (std::size_t i = 0; i < n; ++i) best[i] = dist2(i, centers.data());
  while (centers.size() < k * dim) {
    double total = 0;
    for (double d : best) total += d;
    std::size_t pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= best[pick];
        if (r <= 0 && best[pick] > 0) break;
      }
    } else {
      pick = first(rng);
    }
    const std::size_t c = centers.size() / dim;
    centers.insert(centers.end(), points.begin() + static_cast<std::ptrdiff_t>(pick * dim),
                   points.begin() + static_cast<std::ptrdiff_t>((pick + 1) * dim));
    for (std::size_t i = 0; i < n; ++i) best[i] = std::min(best[i], dist2(i, centers.data() + c * dim));
  }
  std::vector<int> assign(n, -1);
  for (std::size_t it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int arg = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = dist2(i, centers.data() + c * dim);
        if (d < bd) {
          bd = d;
          arg = static_cast<int>(c);
        }
      }
      changed = changed || assign[i] != arg;
      assign[i] = arg;
    }
    if (!changed) break;
    std::vector<double> sum(k * dim, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      ++count[c];
      for (std::size_t j = 0; j < dim; ++j) sum[c * dim + j] += points[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] == 0) continue;  // keep an emptied centre where it was
      for (std::size_t j = 0; j < dim; ++j) centers[c * dim + j] = sum[c * dim + j] / static_cast<double>(count[c]);
    }
  }
  return assign;
}

ClusterReport cluster_explanations(const std::vector<Explanation>& explanations, const Dataset& dataset,
                                   const AtomPool& pool, std::span<const double> atom_embeddings, std::size_t dim,
                                   std::size_t k, std::uint64_t seed, std::size_t top_atoms) {
  if (k < 1) throw std::invalid_argument("cluster count must be at least 1");
  if (k > explanations.size()) {
    throw std::invalid_argument("cluster count " + std::to_string(k) + " exceeds " +
                                std::to_string(explanations.size()) + " explanations");
  }
  if (atom_embeddings.size() != pool.size() * dim) throw std::invalid_argument("atom embeddings do not match pool");
  std::unordered_map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < dataset.instances.size(); ++i) by_id.emplace(dataset.instances[i].id, i);

  const std::size_t n = explanations.size();
  std::vector<double> points(n * dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& ids = explanations[i].atom_ids;
    if (ids.empty()) continue;
    for (int a : ids)
      for (std::size_t j = 0; j < dim; ++j) points[i * dim + j] += atom_embeddings[static_cast<std::size_t>(a) * dim + j];
    for (std::size_t j = 0; j < dim; ++j) points[i * dim + j] /= static_cast<double>(ids.size());
  }
  auto assign = kmeans(points, dim, k, seed);

  ClusterReport report;
  report.k = k;
  report.total = n;
  report.clusters.resize(k);
  const std::size_t classes = dataset.num_classes();
  std::vector<std::size_t> correct(k, 0);
  std::vector<double> length(k, 0);
  std::vector<std::vector<std::size_t>> labels(k, std::vector<std::size_t>(classes, 0));
  std::vector<std::map<int, std::size_t>> freq(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(assign[i]);
    const auto& e = explanations[i];
    const auto it = by_id.find(e.instance_id);
    if (it == by_id.end()) throw std::invalid_argument("explanation for unknown instance " + std::to_string(e.instance_id));
    const auto& x = dataset.instances[it->second];
    ++report.clusters[c].members;
    correct[c] += e.predicted_class == x.label;
    ++labels[c][static_cast<std::size_t>(x.label)];
    length[c] += x.length;
    for (int a : e.atom_ids) ++freq[c][a];
  }
  for (std::size_t c = 0; c < k; ++c) {
    auto& s = report.clusters[c];
    const double m = static_cast<double>(std::max<std::size_t>(s.members, 1));
    s.percent = 100.0 * static_cast<double>(s.members) / static_cast<double>(n);
    s.accuracy = static_cast<double>(correct[c]) / m;
    s.label = static_cast<int>(std::max_element(labels[c].begin(), labels[c].end()) - labels[c].begin());
    s.label_ratio = static_cast<double>(labels[c][static_cast<std::size_t>(s.label)]) / m;
    if (dataset.kind == DatasetKind::Text) s.mean_length = length[c] / m;
    std::vector<std::pair<int, std::size_t>> f(freq[c].begin(), freq[c].end());
    std::stable_sort(f.begin(), f.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (f.size() > top_atoms) f.resize(top_atoms);
    s.top_atoms = std::move(f);
  }
  return report;
}

nlohmann::json ClusterReport::to_json(const AtomPool& pool, const Dataset& dataset) const {
  auto arr = nlohmann::json::array();
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const auto& s = clusters[c];
    auto atoms = nlohmann::json::array();
    for (const auto& [a, count] : s.top_atoms) atoms.push_back({{"atom_id", a}, {"atom", pool[a].display}, {"count", count}});
    nlohmann::json j = {{"cluster", c},
                        {"accuracy", s.accuracy},
                        {"label", dataset.classes.at(static_cast<std::size_t>(s.label))},
                        {"label_ratio", s.label_ratio},
                        {"num", s.members},
                        {"percent", s.percent},
                        {"atoms", atoms}};
    if (s.mean_length) j["length"] = *s.mean_length;
    arr.push_back(std::move(j));
  }
  return {{"k", k}, {"total", total}, {"clusters", arr}};
}

std::string ClusterReport::table(const AtomPool& pool, const Dataset& dataset, std::size_t atoms_shown) const {
  const bool text = dataset.kind == DatasetKind::Text;
  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "Cluster | Acc | Label | Num";
  if (text) os << " | Len";
  os << " | Atoms in the explanations (ordered by frequency)\n";
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    const auto& s = clusters[c];
    os << c << " | " << 100 * s.accuracy << "% | " << dataset.classes.at(static_cast<std::size_t>(s.label)) << " ("
       << 100 * s.label_ratio << "%) | " << s.members << " (" << s.percent << "%)";
    if (text) os << " | " << s.mean_length.value_or(0.0);
    os << " | ";
    for (std::size_t i = 0; i < s.top_atoms.size() && i < atoms_shown; ++i)
      os << (i ? ", " : "") << pool[s.top_atoms[i].first].display << " (" << s.top_atoms[i].second << ")";
    os << '\n';
  }
  return os.str();
}

nlohmann::json SteeringReport::to_json(const AtomPool& pool, const Dataset& dataset, std::size_t max_instances) const {
  auto repl = nlohmann::json::array();
  for (const auto& [a, c] : replacements) repl.push_back({{"atom_id", a}, {"atom", pool[a].display}, {"count", c}});
  auto sp = nlohmann::json::array();
  for (const auto& s : splits)
    sp.push_back({{"split", s.split},
                  {"affected", s.affected},
                  {"accuracy_before", s.accuracy_before},
                  {"accuracy_after", s.accuracy_after},
                  {"accuracy_delta", s.accuracy_after - s.accuracy_before}});
  auto inst = nlohmann::json::array();
  for (std::size_t i = 0; i < instances.size() && i < max_instances; ++i) {
    const auto& d = instances[i];
    inst.push_back({{"split", d.split},
                    {"instance_id", d.before.instance_id},
                    {"before", d.before.to_json(dataset)},
                    {"after", d.after.to_json(dataset)},
                    {"confidence_delta", d.after.confidence - d.before.confidence},
                    {"correct_before", d.correct_before},
                    {"correct_after", d.correct_after}});
  }
  auto excl = nlohmann::json::array();
  for (int a : excluded) excl.push_back({{"atom_id", a}, {"atom", pool[a].display}});
  return {{"excluded", excl},  {"version", version},      {"affected", affected},
          {"replacements", repl}, {"splits", sp},          {"instances", inst},
          {"instances_total", instances.size()}};
}

SteeringSession::SteeringSession(std::shared_ptr<const Explainer> explainer, std::vector<std::string> splits)
    : explainer_(std::move(explainer)), splits_(std::move(splits)) {
  for (const auto& s : splits_) explainer_->split_rows(s);
}

HardPrior SteeringSession::prior() const {
  auto p = explainer_->default_prior();
  p.excluded = excluded_;
  return p;
}

const Explanation& SteeringSession::current(const std::string& split, std::size_t position) const {
  auto it = overrides_.find(split);
  if (it != overrides_.end()) {
    auto jt = it->second.find(position);
    if (jt != it->second.end()) return jt->second;
  }
  return explainer_->baseline(split).at(position);
}

Explanation SteeringSession::explain(const Instance& x) const { return explainer_->explain(x, prior()); }

SteeringReport SteeringSession::exclude(const std::vector<int>& atom_ids) {
  const auto& pool = explainer_->model().pool();
  for (int a : atom_ids) {
    if (a == kNullAtom) throw std::invalid_argument("the NULL atom cannot be excluded");
    if (a < 0 || static_cast<std::size_t>(a) >= pool.size()) {
      throw std::out_of_range("atom id " + std::to_string(a) + " outside pool of " + std::to_string(pool.size()));
    }
  }
  const std::set<int> added(atom_ids.begin(), atom_ids.end());
  excluded_.insert(added.begin(), added.end());
  ++version_;

  SteeringReport report;
  report.excluded.assign(excluded_.begin(), excluded_.end());
  report.version = version_;
  std::map<int, std::size_t> gained;
  const auto& ds = explainer_->dataset();
  for (const auto& split : splits_) {
    const auto& rows = explainer_->split_rows(split);
    std::vector<std::size_t> hit;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& raw = current(split, i).raw_ids;
      if (std::any_of(raw.begin(), raw.end(), [&](int a) { return added.contains(a); })) hit.push_back(i);
    }
    std::vector<std::size_t> hit_rows;
    for (auto i : hit) hit_rows.push_back(rows[i]);
    auto fresh = explainer_->explain_rows(hit_rows, prior());
    SplitDelta sd;
    sd.split = split;
    sd.affected = hit.size();
    std::size_t before_ok = 0, after_ok = 0;
    for (std::size_t j = 0; j < hit.size(); ++j) {
      InstanceDelta d;
      d.split = split;
      d.before = current(split, hit[j]);
      d.after = std::move(fresh[j]);
      const int label = ds.instances[hit_rows[j]].label;
      d.correct_before = d.before.predicted_class == label;
      d.correct_after = d.after.predicted_class == label;
      before_ok += d.correct_before;
      after_ok += d.correct_after;
      const std::set<int> old(d.before.atom_ids.begin(), d.before.atom_ids.end());
      for (int a : d.after.atom_ids)
        if (!old.contains(a)) ++gained[a];
      overrides_[split][hit[j]] = d.after;
      report.instances.push_back(std::move(d));
    }
    if (!hit.empty()) {
      sd.accuracy_before = static_cast<double>(before_ok) / static_cast<double>(hit.size());
      sd.accuracy_after = static_cast<double>(after_ok) / static_cast<double>(hit.size());
    }
    report.affected += hit.size();
    report.splits.push_back(sd);
  }
  report.replacements.assign(gained.begin(), gained.end());
  std::stable_sort(report.replacements.begin(), report.replacements.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return report;
}

void SteeringSession::reset() {
  excluded_.clear();
  overrides_.clear();
  ++version_;
}

}  // namespace lorex
