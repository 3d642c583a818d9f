#include "lorex/estimator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lorex/diff/adam.hpp"
#include "lorex/diff/checkpoint.hpp"
#include "lorex/diff/graph.hpp"
#include "lorex/diff/ops.hpp"
#include "lorex/seed.hpp"

namespace lorex {

using diff::Tensor;

std::vector<double> smooth(std::span<const double> p_hat, double n, double beta) {
  const double k = static_cast<double>(p_hat.size());
  std::vector<double> out(p_hat.size());
  // Divided through by beta so that n = 0 gives exactly 1/K.
  const double r = n / beta;
  for (std::size_t y = 0; y < p_hat.size(); ++y) out[y] = (p_hat[y] * r + 1.0) / (r + k);
  return out;
}

std::string PretrainReport::csv() const {
  std::ostringstream os;
  os << "epoch,loss,mae_p,mae_c,sigma_p,sigma_n,seconds\n";
  for (const auto& e : epochs)
    os << e.epoch << ',' << e.loss << ',' << e.mae_p << ',' << e.mae_c << ',' << e.sigma_p << ',' << e.sigma_n << ','
       << e.seconds << '\n';
  return os.str();
}

ConsequentEstimator::ConsequentEstimator(const EstimatorConfig& config, std::span<const double> atom_embeddings,
                                         std::vector<double> train_prior, std::uint64_t seed)
    : config_(config), prior_(std::move(train_prior)) {
  if (prior_.size() != config_.num_classes) {
    throw diff::ShapeError("estimator", "prior has " + std::to_string(prior_.size()) + " classes, config " +
                                            std::to_string(config_.num_classes));
  }
  if (config_.width == 0 || atom_embeddings.size() % config_.width != 0) {
    throw diff::ShapeError("estimator", "embedding table is not a multiple of width " + std::to_string(config_.width));
  }
  build(seed, atom_embeddings);
}

void ConsequentEstimator::build(std::uint64_t seed, std::span<const double> atom_embeddings) {
  std::mt19937_64 rng(derive_seed(seed, "estimator.init"));
  const std::size_t d = config_.width;
  const std::size_t atoms = atom_embeddings.size() / d;
  embeddings_ = params_.add("atoms.embedding", {atoms, d}, {atom_embeddings.begin(), atom_embeddings.end()});
  if (config_.positional) positions_ = params_.add_uniform("positions", {config_.max_len, d}, 0.02, rng);
  for (std::size_t i = 0; i < config_.depth; ++i)
    encoder_.emplace_back(params_, "encoder." + std::to_string(i), d, config_.ffn, rng);
  mlp_ = diff::Linear(params_, "mlp", d, config_.mlp_hidden, rng);
  const std::size_t k = config_.num_classes;
  class_head_ = diff::Linear(params_, "head.class", config_.mlp_hidden, k == 2 ? 1 : k, rng);
  coverage_head_ = diff::Linear(params_, "head.coverage", config_.mlp_hidden, 1, rng);
  log_sigma_p_ = params_.add("log_sigma_p", {}, {0.0});
  log_sigma_n_ = params_.add("log_sigma_n", {}, {0.0});
  beta_raw_ = params_.add("beta_raw", {}, {std::log(std::expm1(1.0))});
}

ConsequentEstimator::Output ConsequentEstimator::forward(const Tensor& inputs, std::span<const std::uint8_t> valid) const {
  const std::size_t len = config_.max_len;
  if (inputs.cols() != config_.width || inputs.rows() % len != 0 || valid.size() != inputs.rows()) {
    throw diff::ShapeError("estimator", "inputs " + diff::to_string(inputs.shape()) + " with " +
                                            std::to_string(valid.size()) + " flags, length " + std::to_string(len));
  }
  const std::size_t batch = inputs.rows() / len;
  Tensor x = inputs;
  if (config_.positional) {
    std::vector<int> pos(inputs.rows());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i % len);
    x = diff::add(x, diff::embedding(positions_, pos));
  }
  for (const auto& layer : encoder_) x = layer(x, len, valid);
  auto hidden = diff::relu(mlp_(diff::segment_mean(x, len, valid)));
  auto class_logits = class_head_(hidden);
  Tensor probs;
  if (config_.num_classes == 2) {
    auto s = diff::sigmoid(class_logits);
    probs = diff::concat_cols({diff::add_scalar(diff::scale(s, -1.0), 1.0), s});
  } else {
    probs = diff::softmax(class_logits);
  }
  auto coverage = diff::sigmoid(coverage_head_(hidden));

  std::vector<double> keep(batch, 0.0);
  bool any_empty = false;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < len; ++i) keep[b] = keep[b] || valid[b * len + i];
    any_empty = any_empty || keep[b] == 0.0;
  }
  if (any_empty) {
    const std::size_t k = config_.num_classes;
    std::vector<double> prior_fill(batch * k, 0.0), cov_fill(batch, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      if (keep[b] != 0.0) continue;
      std::copy(prior_.begin(), prior_.end(), prior_fill.begin() + static_cast<std::ptrdiff_t>(b * k));
      cov_fill[b] = 1.0;
    }
    auto mask = Tensor::constant({batch, 1}, keep);
    probs = diff::add(diff::mul(probs, mask), Tensor::constant({batch, k}, prior_fill));
    coverage = diff::add(diff::mul(coverage, mask), Tensor::constant({batch, 1}, cov_fill));
  }
  return {probs, coverage};
}

std::vector<int> ConsequentEstimator::pad(std::span<const int> antecedent) const {
  if (antecedent.size() > config_.max_len) {
    throw DataError("antecedent", "has " + std::to_string(antecedent.size()) + " atoms, limit is " +
                                      std::to_string(config_.max_len));
  }
  const auto atoms = static_cast<int>(embeddings_.rows());
  std::vector<int> ids(config_.max_len, kNullAtom);
  for (std::size_t i = 0; i < antecedent.size(); ++i) {
    if (antecedent[i] < 0 || antecedent[i] >= atoms) {
      throw DataError("antecedent", "atom id " + std::to_string(antecedent[i]) + " outside pool of " +
                                        std::to_string(atoms));
    }
    ids[i] = antecedent[i];
  }
  return ids;
}

ConsequentEstimator::Output ConsequentEstimator::forward_ids(std::span<const int> ids) const {
  std::vector<std::uint8_t> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != kNullAtom;
  return forward(diff::embedding(embeddings_, ids), valid);
}

Tensor ConsequentEstimator::smoothed(const Output& out) const {
  auto beta = diff::softplus(beta_raw_);
  auto r = diff::div(diff::scale(out.coverage, static_cast<double>(config_.train_size)), beta);
  auto num = diff::add_scalar(diff::mul(out.probs, r), 1.0);
  auto den = diff::add_scalar(r, static_cast<double>(config_.num_classes));
  return diff::div(num, den);
}

Tensor ConsequentEstimator::loss(const Output& out, const Tensor& p_target, const Tensor& c_target) const {
  const double inv_b = 1.0 / static_cast<double>(out.probs.rows());
  auto res_p = diff::scale(diff::squared_error(out.probs, p_target), inv_b);
  auto res_c = diff::scale(diff::squared_error(out.coverage, c_target), inv_b);
  auto prec_p = diff::scale(diff::exp(diff::scale(log_sigma_p_, -2.0)), 0.5);
  auto prec_n = diff::scale(diff::exp(diff::scale(log_sigma_n_, -2.0)), 0.5);
  return diff::add(diff::add(diff::mul(res_p, prec_p), diff::mul(res_c, prec_n)), diff::add(log_sigma_p_, log_sigma_n_));
}

std::vector<ConsequentEstimate> ConsequentEstimator::predict_batch(const std::vector<std::vector<int>>& antecedents) const {
  std::vector<int> ids;
  ids.reserve(antecedents.size() * config_.max_len);
  for (const auto& a : antecedents) {
    auto p = pad(a);
    ids.insert(ids.end(), p.begin(), p.end());
  }
  std::vector<ConsequentEstimate> out;
  if (antecedents.empty()) return out;
  auto o = forward_ids(ids);
  const double b = beta();
  const std::size_t k = config_.num_classes;
  for (std::size_t i = 0; i < antecedents.size(); ++i) {
    ConsequentEstimate e;
    e.p.assign(o.probs.data().begin() + static_cast<std::ptrdiff_t>(i * k),
               o.probs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    e.c = o.coverage.data()[i];
    e.n = e.c * static_cast<double>(config_.train_size);
    e.smoothed = smooth(e.p, e.n, b);
    out.push_back(std::move(e));
  }
  return out;
}

ConsequentEstimate ConsequentEstimator::predict(std::span<const int> antecedent) const {
  return predict_batch({std::vector<int>(antecedent.begin(), antecedent.end())}).front();
}

double ConsequentEstimator::beta() const {
  const double r = beta_raw_.item();
  return r > 30 ? r : std::log1p(std::exp(r));
}
double ConsequentEstimator::sigma_p() const { return std::exp(log_sigma_p_.item()); }
double ConsequentEstimator::sigma_n() const { return std::exp(log_sigma_n_.item()); }

void ConsequentEstimator::freeze_except_beta() {
  params_.set_requires_grad(false);
  beta_raw_.set_requires_grad(true);
}

std::pair<double, double> ConsequentEstimator::evaluate(const std::vector<SampledRule>& rules) const {
  if (rules.empty()) return {0.0, 0.0};
  double mae_p = 0, mae_c = 0;
  const std::size_t chunk = 256;
  const double n_train = static_cast<double>(config_.train_size);
  for (std::size_t start = 0; start < rules.size(); start += chunk) {
    const std::size_t end = std::min(rules.size(), start + chunk);
    std::vector<std::vector<int>> batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(rules[i].atoms);
    auto est = predict_batch(batch);
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = est[i - start];
      double d = 0;
      for (std::size_t y = 0; y < e.p.size(); ++y) d += std::abs(e.p[y] - rules[i].stats.p_hat[y]);
      mae_p += d / static_cast<double>(e.p.size());
      mae_c += std::abs(e.c - static_cast<double>(rules[i].stats.n) / n_train);
    }
  }
  return {mae_p / static_cast<double>(rules.size()), mae_c / static_cast<double>(rules.size())};
}

PretrainReport ConsequentEstimator::pretrain(const std::vector<SampledRule>& rules, const PretrainConfig& config,
                                             const std::function<void(const PretrainEpoch&)>& on_epoch) {
  if (rules.empty()) throw DataError("rules", "pretraining needs at least one rule");
  for (const auto& r : rules)
    if (r.stats.p_hat.size() != config_.num_classes || r.atoms.size() > config_.max_len) {
      throw DataError("rules", "rule does not match the estimator (classes or length)");
    }
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(rules.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(config.seed, "estimator.pretrain"));
  std::shuffle(order.begin(), order.end(), rng);
  auto n_val = static_cast<std::size_t>(std::floor(config.val_fraction * static_cast<double>(rules.size())));
  if (rules.size() > 1) n_val = std::min(n_val, rules.size() - 1);
  std::vector<SampledRule> val;
  for (std::size_t i = 0; i < n_val; ++i) val.push_back(rules[order[i]]);
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

  params_.set_requires_grad(true);
  beta_raw_.set_requires_grad(false);
  if (!config.train_embeddings) embeddings_.set_requires_grad(false);
  diff::Adam opt({.lr = config.lr});
  for (const auto& [name, t] : params_.entries())
    if (t.requires_grad()) opt.add(name, t);
  diff::ExponentialLR sched(opt, config.gamma);

  PretrainReport report;
  report.train_rules = train.size();
  report.val_rules = val.size();
  const std::size_t k = config_.num_classes;
  const double n_train = static_cast<double>(config_.train_size);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto te = std::chrono::steady_clock::now();
    std::shuffle(train.begin(), train.end(), rng);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < train.size(); start += config.batch) {
      const std::size_t end = std::min(train.size(), start + config.batch);
      const std::size_t b = end - start;
      std::vector<int> ids;
      std::vector<double> p_t, c_t;
      for (std::size_t i = start; i < end; ++i) {
        const auto& r = rules[train[i]];
        auto padded = pad(r.atoms);
        ids.insert(ids.end(), padded.begin(), padded.end());
        p_t.insert(p_t.end(), r.stats.p_hat.begin(), r.stats.p_hat.end());
        c_t.push_back(static_cast<double>(r.stats.n) / n_train);
      }
      opt.zero_grad();
      auto out = forward_ids(ids);
      auto l = loss(out, Tensor::constant({b, k}, std::move(p_t)), Tensor::constant({b, 1}, std::move(c_t)));
      if (!std::isfinite(l.item())) {
        throw std::runtime_error("estimator pretraining diverged at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batches) + ": loss " + std::to_string(l.item()) + ", sigma_p " +
                                 std::to_string(sigma_p()) + ", sigma_n " + std::to_string(sigma_n()));
      }
      loss_sum += l.item();
      diff::backward(l);
      opt.step();
      for (auto* s : {&log_sigma_p_, &log_sigma_n_}) {
        auto v = s->mutable_data();
        v[0] = std::max(v[0], config_.log_sigma_floor);
      }
      ++batches;
    }
    sched.step();
    PretrainEpoch e;
    e.epoch = epoch;
    e.loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    std::tie(e.mae_p, e.mae_c) = evaluate(val);
    e.sigma_p = sigma_p();
    e.sigma_n = sigma_n();
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - te).count();
    report.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  std::tie(report.val_mae_p, report.val_mae_c) = evaluate(val);
  report.val_mae_p_by_len.assign(config_.max_len, 0.0);
  for (std::size_t l = 1; l <= config_.max_len; ++l) {
    std::vector<SampledRule> subset;
    for (const auto& r : val)
      if (r.atoms.size() == l) subset.push_back(r);
    report.val_mae_p_by_len[l - 1] = subset.empty() ? std::nan("") : evaluate(subset).first;
  }
  params_.set_requires_grad(true);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

void ConsequentEstimator::save(const std::filesystem::path& path) const {
  nlohmann::json meta = {{"kind", "consequent-estimator"},
                         {"max_len", config_.max_len},
                         {"width", config_.width},
                         {"ffn", config_.ffn},
                         {"mlp_hidden", config_.mlp_hidden},
                         {"depth", config_.depth},
                         {"positional", config_.positional},
                         {"num_classes", config_.num_classes},
                         {"train_size", config_.train_size},
                         {"log_sigma_floor", config_.log_sigma_floor},
                         {"prior", prior_}};
  diff::save_checkpoint(path, params_, meta);
}

ConsequentEstimator ConsequentEstimator::load(const std::filesystem::path& path) {
  auto data = diff::load_checkpoint(path);
  const auto& m = data.meta;
  if (m.value("kind", "") != "consequent-estimator") {
    throw std::runtime_error(path.string() + ": not a consequent estimator checkpoint");
  }
  EstimatorConfig cfg;
  cfg.max_len = m.at("max_len");
  cfg.width = m.at("width");
  cfg.ffn = m.at("ffn");
  cfg.mlp_hidden = m.at("mlp_hidden");
  cfg.depth = m.at("depth");
  cfg.positional = m.at("positional");
  cfg.num_classes = m.at("num_classes");
  cfg.train_size = m.at("train_size");
  cfg.log_sigma_floor = m.at("log_sigma_floor");
  std::size_t atoms = 0;
  for (const auto& t : data.tensors)
    if (t.name == "atoms.embedding") atoms = t.shape.at(0);
  ConsequentEstimator est(cfg, std::vector<double>(atoms * cfg.width, 0.0), m.at("prior").get<std::vector<double>>(), 0);
  diff::load_into(path, est.params_);
  return est;
}

}  // namespace lorex
