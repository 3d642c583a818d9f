#include "lorex/model.hpp"

#include <algorithm>
#include <stdexcept>

#include "lorex/diff/checkpoint.hpp"
#include "lorex/diff/graph.hpp"
#include "lorex/diff/ops.hpp"
#include "lorex/seed.hpp"

namespace lorex {

using diff::Tensor;

namespace {

constexpr std::size_t kInferenceChunk = 512;

Tensor encoded(const Dataset& dataset, const std::vector<std::size_t>& rows) {
  return Tensor::constant({rows.size(), dataset.input_dim()}, dataset.encode_rows(rows));
}

}  // namespace

BaseModel::BaseModel(std::size_t input_dim, std::size_t hidden, std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "base.init"));
  backbone_ = Backbone(params_, "backbone", input_dim, hidden, hidden, rng);
  head_ = diff::Linear(params_, "head", hidden, num_classes, rng);
}

Tensor BaseModel::logits(const Tensor& x) const { return head_(backbone_(x)); }

std::vector<double> BaseModel::predict_proba(const Dataset& dataset, const std::vector<std::size_t>& rows) const {
  std::vector<double> out;
  out.reserve(rows.size() * num_classes());
  for (std::size_t start = 0; start < rows.size(); start += kInferenceChunk) {
    std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                   rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + kInferenceChunk)));
    auto p = diff::softmax(logits(encoded(dataset, chunk)));
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return out;
}

std::vector<double> BaseModel::representations(const Dataset& dataset, const std::vector<std::size_t>& rows) const {
  std::vector<double> out;
  out.reserve(rows.size() * hidden());
  for (std::size_t start = 0; start < rows.size(); start += kInferenceChunk) {
    std::vector<std::size_t> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                   rows.begin() + static_cast<std::ptrdiff_t>(std::min(rows.size(), start + kInferenceChunk)));
    auto z = representation(encoded(dataset, chunk));
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return out;
}

void BaseModel::save(const std::filesystem::path& path) const {
  diff::save_checkpoint(path, params_,
                        {{"kind", "base-model"},
                         {"input_dim", input_dim()},
                         {"hidden", hidden()},
                         {"num_classes", num_classes()}});
}

BaseModel BaseModel::load(const std::filesystem::path& path) {
  auto meta = diff::load_checkpoint(path).meta;
  if (meta.value("kind", "") != "base-model") throw std::runtime_error(path.string() + ": not a base model checkpoint");
  BaseModel m(meta.at("input_dim"), meta.at("hidden"), meta.at("num_classes"), 0);
  diff::load_into(path, m.params_);
  return m;
}

SelorModel::SelorModel(const GeneratorConfig& config, AtomPool pool, ConsequentEstimator estimator,
                       std::uint64_t seed)
    : pool_(std::move(pool)), estimator_(std::move(estimator)) {
  if (estimator_.config().width != config.hidden) {
    throw diff::ShapeError("selor", "estimator width " + std::to_string(estimator_.config().width) +
                                        " differs from |h| = " + std::to_string(config.hidden));
  }
  std::mt19937_64 rng(derive_seed(seed, "selor.init"));
  generator_ = AntecedentGenerator(params_, config, pool_, rng);
  estimator_.freeze_except_beta();
}

SelorModel::Output SelorModel::forward(const Dataset& dataset, const std::vector<std::size_t>& rows,
                                       const HardPrior& prior, Decode mode, std::mt19937_64* rng) const {
  std::vector<std::vector<int>> satisfied;
  satisfied.reserve(rows.size());
  for (auto r : rows) satisfied.push_back(pool_.satisfied(dataset.instances.at(r)));
  return forward(encoded(dataset, rows), satisfied, prior, mode, rng);
}

SelorModel::Output SelorModel::forward(const Tensor& x, const std::vector<std::vector<int>>& satisfied,
                                       const HardPrior& prior, Decode mode, std::mt19937_64* rng) const {
  if (prior.max_len != estimator_.config().max_len) {
    throw std::invalid_argument("hard prior length " + std::to_string(prior.max_len) +
                                " differs from the estimator's " + std::to_string(estimator_.config().max_len));
  }
  Output out;
  out.generation = generator_.generate(x, satisfied, prior, mode, rng);
  const auto& gen = out.generation;
  const std::size_t batch = x.rows(), len = prior.max_len, d = estimator_.config().width;
  // The estimator only ever sees the generated antecedent, never x.
  std::vector<Tensor> steps;
  steps.reserve(len);
  for (const auto& sel : gen.selections) steps.push_back(diff::matmul(sel, estimator_.embeddings()));
  auto inputs = diff::reshape(diff::concat_cols(steps), {batch * len, d});
  std::vector<std::uint8_t> valid(batch * len);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < len; ++i) valid[b * len + i] = gen.ids[b][i] != kNullAtom;
  out.smoothed = estimator_.smoothed(estimator_.forward(inputs, valid));
  return out;
}

Tensor SelorModel::loss(const Output& out, std::span<const int> labels, const RulePenalty& penalty) const {
  const std::size_t batch = out.smoothed.rows();
  if (labels.size() != batch) {
    throw diff::ShapeError("selor loss", std::to_string(labels.size()) + " labels for " + std::to_string(batch) + " rows");
  }
  auto nll = diff::scale(diff::mean(diff::log(diff::pick(out.smoothed, labels))), -1.0);
  if (!penalty) return nll;
  double total = 0;
  for (const auto& ids : out.generation.ids) total += penalty(ids);
  return diff::add_scalar(nll, total / static_cast<double>(batch));
}

void SelorModel::init_backbone_from(const BaseModel& base) {
  for (auto [name, t] : params_.entries()) {
    if (name.rfind("backbone.", 0) != 0) continue;
    auto src = base.params().get(name);
    if (src.shape() != t.shape()) {
      throw diff::ShapeError("init_backbone_from", name + " is " + diff::to_string(t.shape()) + " here and " +
                                                       diff::to_string(src.shape()) + " in the base model");
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

std::vector<std::pair<std::string, Tensor>> SelorModel::trainable() const {
  auto out = params_.entries();
  out.emplace_back("estimator.beta_raw", estimator_.beta_raw());
  return out;
}

std::uint64_t SelorModel::fingerprint() const {
  return params_.fingerprint() ^ (estimator_.params().fingerprint() * 0x9e3779b97f4a7c15ull);
}

void SelorModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const auto& c = generator_.config();
  diff::save_checkpoint(dir / "generator.bin", params_,
                        {{"kind", "selor-generator"}, {"input_dim", c.input_dim}, {"hidden", c.hidden}, {"tau", c.tau}});
  estimator_.save(dir / "estimator.bin");
}

SelorModel SelorModel::load(const std::filesystem::path& dir, AtomPool pool) {
  auto meta = diff::load_checkpoint(dir / "generator.bin").meta;
  if (meta.value("kind", "") != "selor-generator") {
    throw std::runtime_error((dir / "generator.bin").string() + ": not a generator checkpoint");
  }
  GeneratorConfig c;
  c.input_dim = meta.at("input_dim");
  c.hidden = meta.at("hidden");
  c.tau = meta.at("tau");
  if (pool.embedding_dim() != c.hidden) pool.set_embeddings(std::vector<double>(pool.size() * c.hidden, 0.0), c.hidden);
  SelorModel m(c, std::move(pool), ConsequentEstimator::load(dir / "estimator.bin"), 0);
  diff::load_into(dir / "generator.bin", m.params_);
  return m;
}

}  // namespace lorex
