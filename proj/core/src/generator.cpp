#include "lorex/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "lorex/diff/ops.hpp"

namespace lorex {

using diff::Tensor;

Backbone::Backbone(diff::ParameterStore& store, const std::string& name, std::size_t input_dim, std::size_t hidden,
                   std::size_t output, std::mt19937_64& rng)
    : fc1_(store, name + ".fc1", input_dim, hidden, rng),
      fc2_(store, name + ".fc2", hidden, hidden, rng),
      fc3_(store, name + ".fc3", hidden, output, rng) {}

Tensor Backbone::operator()(const Tensor& x) const {
  if (x.cols() != input_dim()) {
    throw diff::ShapeError("backbone", "input " + diff::to_string(x.shape()) + ", expected width " +
                                           std::to_string(input_dim()));
  }
  return fc3_(diff::relu(fc2_(diff::relu(fc1_(x)))));
}

double Generation::probability(std::size_t b) const {
  double p = 1.0;
  for (double s : step_probs.at(b)) p *= s;
  return p;
}

namespace {

void check_mask(const Tensor& logits, std::span<const std::uint8_t> mask, std::string_view op) {
  if (mask.size() != logits.size()) {
    throw diff::ShapeError(op, "mask has " + std::to_string(mask.size()) + " entries for logits " +
                                   diff::to_string(logits.shape()));
  }
}

std::vector<double> one_hot_argmax(std::span<const double> scores, std::span<const std::uint8_t> mask,
                                   std::size_t rows, std::size_t cols, std::vector<int>* choice) {
  std::vector<double> hard(rows * cols, 0.0);
  if (choice) choice->assign(rows, -1);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = cols;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!mask[r * cols + c]) continue;
      if (best == cols || scores[r * cols + c] > best_v) {
        best = c;
        best_v = scores[r * cols + c];
      }
    }
    if (best == cols) throw std::logic_error("candidate mask row " + std::to_string(r) + " allows nothing");
    hard[r * cols + best] = 1.0;
    if (choice) (*choice)[r] = static_cast<int>(best);
  }
  return hard;
}

}  // namespace

Tensor gumbel_select(const Tensor& logits, std::span<const std::uint8_t> mask, double tau, std::mt19937_64& rng,
                     std::vector<int>* choice) {
  check_mask(logits, mask, "gumbel_select");
  if (!(tau > 0)) throw std::invalid_argument("gumbel_select: temperature must be positive");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> noise(logits.size());
  for (auto& g : noise) {
    double v = u(rng);
    while (v <= 0.0) v = u(rng);
    g = -std::log(-std::log(v));
  }
  const auto rows = logits.rows(), cols = logits.cols();
  std::vector<double> perturbed(logits.size());
  for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = logits.data()[i] + noise[i];
  auto hard = one_hot_argmax(perturbed, mask, rows, cols, choice);
  auto soft = diff::masked_softmax(
      diff::scale(diff::add(logits, Tensor::constant({rows, cols}, std::move(noise))), 1.0 / tau), mask);
  return diff::straight_through(soft, std::move(hard));
}

Tensor greedy_select(const Tensor& logits, std::span<const std::uint8_t> mask, std::vector<int>* choice) {
  check_mask(logits, mask, "greedy_select");
  auto hard = one_hot_argmax(logits.data(), mask, logits.rows(), logits.cols(), choice);
  return diff::straight_through(diff::masked_softmax(logits, mask), std::move(hard));
}

AntecedentGenerator::AntecedentGenerator(diff::ParameterStore& store, const GeneratorConfig& config,
                                         const AtomPool& pool, std::mt19937_64& rng)
    : config_(config) {
  if (pool.embedding_dim() != config.hidden || pool.embeddings().size() != pool.size() * config.hidden) {
    throw diff::ShapeError("generator", "atom embeddings of width " + std::to_string(pool.embedding_dim()) +
                                            " do not match |h| = " + std::to_string(config.hidden));
  }
  backbone_ = Backbone(store, "backbone", config.input_dim, config.hidden, config.hidden, rng);
  gru_ = diff::GRUCell(store, "generator.gru", config.hidden, config.hidden, rng);
  atoms_ = store.add("generator.atoms", {pool.size(), config.hidden}, pool.embeddings());
  kinds_.reserve(pool.size());
  eligible_.reserve(pool.size());
  for (const auto& a : pool.atoms()) {
    kinds_.push_back(a.kind);
    eligible_.push_back(a.id == kNullAtom || a.coverage > 0);
  }
}

Tensor AntecedentGenerator::encode(const Tensor& x) const { return backbone_(x); }

Tensor AntecedentGenerator::logits(const Tensor& h) const { return diff::matmul_nt(h, atoms_); }

Tensor AntecedentGenerator::step_distribution(const Tensor& h, std::span<const std::uint8_t> mask) const {
  return diff::masked_softmax(logits(h), mask);
}

std::vector<std::uint8_t> AntecedentGenerator::initial_mask(const std::vector<std::vector<int>>& satisfied,
                                                            const HardPrior& prior) const {
  const std::size_t a = num_atoms();
  std::vector<std::uint8_t> allowed(a, 0);
  for (std::size_t i = 0; i < a; ++i) {
    allowed[i] = eligible_[i] && !prior.excluded.contains(static_cast<int>(i));
    if (!prior.kinds.empty() && std::find(prior.kinds.begin(), prior.kinds.end(), kinds_[i]) == prior.kinds.end())
      allowed[i] = 0;
  }
  allowed[kNullAtom] = 1;
  std::vector<std::uint8_t> mask(satisfied.size() * a, 0);
  for (std::size_t b = 0; b < satisfied.size(); ++b) {
    for (int id : satisfied[b]) {
      if (id < 0 || static_cast<std::size_t>(id) >= a) {
        throw std::out_of_range("satisfied atom " + std::to_string(id) + " outside pool of " + std::to_string(a));
      }
      mask[b * a + static_cast<std::size_t>(id)] = allowed[static_cast<std::size_t>(id)];
    }
    mask[b * a + kNullAtom] = 1;
  }
  return mask;
}

Generation AntecedentGenerator::generate(const Tensor& x, const std::vector<std::vector<int>>& satisfied,
                                         const HardPrior& prior, Decode mode, std::mt19937_64* rng) const {
  if (prior.max_len == 0) throw std::invalid_argument("hard prior: max_len must be at least 1");
  if (prior.excluded.contains(kNullAtom)) throw std::invalid_argument("hard prior: NULL cannot be excluded");
  if (mode == Decode::Sample && rng == nullptr) throw std::invalid_argument("sampling requires a random engine");
  const std::size_t batch = x.rows(), a = num_atoms();
  if (satisfied.size() != batch) {
    throw diff::ShapeError("generate", std::to_string(satisfied.size()) + " candidate lists for " +
                                           std::to_string(batch) + " rows");
  }
  Generation out;
  out.z = encode(x);
  out.ids.assign(batch, {});
  out.step_probs.assign(batch, {});
  auto mask = initial_mask(satisfied, prior);
  Tensor h = gru_(out.z, Tensor());
  std::vector<int> choice;
  for (std::size_t step = 0; step < prior.max_len; ++step) {
    if (step > 0) h = gru_(diff::matmul(out.selections.back(), atoms_), h);
    auto lg = logits(h);
    Tensor sel = mode == Decode::Sample ? gumbel_select(lg, mask, config_.tau, *rng, &choice)
                                        : greedy_select(lg, mask, &choice);
    // Probabilities of the chosen atoms under the unperturbed step distribution.
    for (std::size_t b = 0; b < batch; ++b) {
      const double* row = lg.data().data() + b * a;
      const std::uint8_t* m = mask.data() + b * a;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < a; ++j)
        if (m[j]) mx = std::max(mx, row[j]);
      double z = 0;
      for (std::size_t j = 0; j < a; ++j)
        if (m[j]) z += std::exp(row[j] - mx);
      const auto c = static_cast<std::size_t>(choice[b]);
      out.step_probs[b].push_back(std::exp(row[c] - mx) / z);
      out.ids[b].push_back(choice[b]);
      if (choice[b] != kNullAtom) mask[b * a + c] = 0;
    }
    out.selections.push_back(sel);
  }
  return out;
}

}  // namespace lorex
