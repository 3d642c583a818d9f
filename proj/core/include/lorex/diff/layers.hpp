#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorex/diff/ops.hpp"
#include "lorex/diff/tensor.hpp"

namespace lorex::diff {

/// Ordered, named collection of trainable tensors.
class ParameterStore {
 public:
  Tensor add(std::string name, Shape shape, std::vector<double> values);
  /// Uniform(-bound, bound) initialisation.
  Tensor add_uniform(std::string name, Shape shape, double bound, std::mt19937_64& rng);

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  Tensor get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return entries_.size(); }

  void zero_grad();
  void set_requires_grad(bool on);
  /// Copies values from another store with identical names and shapes.
  void copy_values_from(const ParameterStore& other);
  /// Deterministic content digest of names, shapes and values.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

/// y = x W + b with W stored [in, out].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_;
  Tensor bias_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
};

/// Gated recurrent unit cell, gate order (reset, update, new).
class GRUCell {
 public:
  GRUCell() = default;
  GRUCell(ParameterStore& store, const std::string& name, std::size_t input, std::size_t hidden,
          std::mt19937_64& rng);
  /// `h` may be undefined, meaning the zero state.
  Tensor operator()(const Tensor& x, const Tensor& h) const;
  std::size_t hidden() const { return hidden_; }

 private:
  Linear input_;
  Linear recurrent_;
  std::size_t hidden_ = 0;
};

/// Post-norm single-head transformer encoder layer:
/// x = LN(x + Attn(x) W_o); x = LN(x + FFN(x)).
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterStore& store, const std::string& name, std::size_t width,
               std::size_t ffn_width, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x, std::size_t group_size,
                    std::span<const std::uint8_t> valid) const;

 private:
  Linear query_, key_, value_, out_;
  Linear ffn_in_, ffn_out_;
  Tensor ln1_gamma_, ln1_beta_, ln2_gamma_, ln2_beta_;
};

}  // namespace lorex::diff
