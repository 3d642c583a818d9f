#pragma once

#include <cstdint>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lorex/atoms.hpp"
#include "lorex/diff/layers.hpp"

namespace lorex {

/// FC-ReLU-FC-ReLU-FC mapping an encoded instance to its representation z.
class Backbone {
 public:
  Backbone() = default;
  Backbone(diff::ParameterStore& store, const std::string& name, std::size_t input_dim, std::size_t hidden,
           std::size_t output, std::mt19937_64& rng);
  diff::Tensor operator()(const diff::Tensor& x) const;
  std::size_t input_dim() const { return fc1_.in_features(); }
  std::size_t output_dim() const { return fc3_.out_features(); }

 private:
  diff::Linear fc1_, fc2_, fc3_;
};

struct HardPrior {
  std::size_t max_len = 4;
  std::vector<AtomKind> kinds;  // allowed atom kinds; empty = all
  std::set<int> excluded;       // steering exclusions; never contains NULL
};

struct GeneratorConfig {
  std::size_t input_dim = 0;
  std::size_t hidden = 512;  // |h|; also the backbone width and atom embedding width
  double tau = 1.0;
};

enum class Decode { Sample, Greedy };

/// One decoded batch. `selections[i]` is the [B, A] straight-through one-hot of step i.
struct Generation {
  diff::Tensor z;
  std::vector<diff::Tensor> selections;
  std::vector<std::vector<int>> ids;          // [B][L], NULL included
  std::vector<std::vector<double>> step_probs;  // [B][L], p(o_i | x, prefix)

  double probability(std::size_t b) const;
};

/// Gumbel-max draw over allowed entries of `logits` at temperature `tau`:
/// forward value is one-hot at argmax(logits + g), backward is the gradient of
/// softmax((logits + g) / tau) restricted to the mask. `choice` receives the index.
diff::Tensor gumbel_select(const diff::Tensor& logits, std::span<const std::uint8_t> mask, double tau,
                           std::mt19937_64& rng, std::vector<int>* choice = nullptr);
/// Noise-free variant: one-hot at the masked argmax, backward through the masked softmax.
diff::Tensor greedy_select(const diff::Tensor& logits, std::span<const std::uint8_t> mask,
                           std::vector<int>* choice = nullptr);

/// Backbone plus GRU decoder over the atom pool. Parameters live in the caller's store.
class AntecedentGenerator {
 public:
  AntecedentGenerator() = default;
  AntecedentGenerator(diff::ParameterStore& store, const GeneratorConfig& config, const AtomPool& pool,
                      std::mt19937_64& rng);

  diff::Tensor encode(const diff::Tensor& x) const;
  /// Masked candidate distribution of one step from the decoder state h: [B, A].
  diff::Tensor step_distribution(const diff::Tensor& h, std::span<const std::uint8_t> mask) const;
  diff::Tensor logits(const diff::Tensor& h) const;

  /// Per-row candidate masks for the first step: satisfied atoms allowed by the prior.
  std::vector<std::uint8_t> initial_mask(const std::vector<std::vector<int>>& satisfied, const HardPrior& prior) const;

  /// Runs prior.max_len decoding steps. `satisfied[b]` lists atoms the b-th row satisfies.
  Generation generate(const diff::Tensor& x, const std::vector<std::vector<int>>& satisfied, const HardPrior& prior,
                      Decode mode, std::mt19937_64* rng) const;

  const Backbone& backbone() const { return backbone_; }
  const diff::Tensor& atom_embeddings() const { return atoms_; }
  std::size_t num_atoms() const { return atoms_.rows(); }
  const GeneratorConfig& config() const { return config_; }

 private:
  GeneratorConfig config_;
  Backbone backbone_;
  diff::GRUCell gru_;
  diff::Tensor atoms_;
  std::vector<AtomKind> kinds_;
  std::vector<std::uint8_t> eligible_;  // nonzero train coverage
};

}  // namespace lorex
