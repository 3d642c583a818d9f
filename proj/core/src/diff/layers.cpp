#include "lorex/diff/layers.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace lorex::diff {

Tensor ParameterStore::add(std::string name, Shape shape, std::vector<double> values) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  auto t = Tensor::parameter(std::move(shape), std::move(values));
  entries_.emplace_back(std::move(name), t);
  return t;
}

Tensor ParameterStore::add_uniform(std::string name, Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = dist(rng);
  return add(std::move(name), std::move(shape), std::move(values));
}

Tensor ParameterStore::get(std::string_view name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

bool ParameterStore::contains(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

void ParameterStore::set_requires_grad(bool on) {
  for (auto& e : entries_) e.second.set_requires_grad(on);
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  for (auto& [name, t] : entries_) {
    auto src = other.get(name);
    if (src.shape() != t.shape()) {
      throw ShapeError("copy_values_from", name + " is " + to_string(t.shape()) + " here and " +
                                               to_string(src.shape()) + " in source");
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
}

std::uint64_t ParameterStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : entries_) {
    mix(name.data(), name.size());
    for (auto e : t.shape()) mix(&e, sizeof e);
    mix(t.data().data(), t.size() * sizeof(double));
  }
  return h;
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::mt19937_64& rng)
    : in_(in), out_(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = store.add_uniform(name + ".weight", {in, out}, bound, rng);
  bias_ = store.add_uniform(name + ".bias", {1, out}, bound, rng);
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight_), bias_); }

GRUCell::GRUCell(ParameterStore& store, const std::string& name, std::size_t input, std::size_t hidden,
                 std::mt19937_64& rng)
    : hidden_(hidden) {
  input_ = Linear(store, name + ".ih", input, 3 * hidden, rng);
  recurrent_ = Linear(store, name + ".hh", hidden, 3 * hidden, rng);
}

Tensor GRUCell::operator()(const Tensor& x, const Tensor& h) const {
  auto gi = input_(x);
  if (h.defined()) return gru_gates(gi, recurrent_(h), h);
  // Zero state: h W_hh vanishes, only the bias remains.
  const std::size_t b = x.rows();
  auto gh = add(Tensor::zeros({b, 3 * hidden_}), recurrent_.bias());
  return gru_gates(gi, gh, Tensor::zeros({b, hidden_}));
}

EncoderLayer::EncoderLayer(ParameterStore& store, const std::string& name, std::size_t width,
                           std::size_t ffn_width, std::mt19937_64& rng) {
  query_ = Linear(store, name + ".q", width, width, rng);
  key_ = Linear(store, name + ".k", width, width, rng);
  value_ = Linear(store, name + ".v", width, width, rng);
  out_ = Linear(store, name + ".o", width, width, rng);
  ffn_in_ = Linear(store, name + ".ffn1", width, ffn_width, rng);
  ffn_out_ = Linear(store, name + ".ffn2", ffn_width, width, rng);
  ln1_gamma_ = store.add(name + ".ln1.gamma", {1, width}, std::vector<double>(width, 1.0));
  ln1_beta_ = store.add(name + ".ln1.beta", {1, width}, std::vector<double>(width, 0.0));
  ln2_gamma_ = store.add(name + ".ln2.gamma", {1, width}, std::vector<double>(width, 1.0));
  ln2_beta_ = store.add(name + ".ln2.beta", {1, width}, std::vector<double>(width, 0.0));
}

Tensor EncoderLayer::operator()(const Tensor& x, std::size_t group_size,
                                std::span<const std::uint8_t> valid) const {
  auto attn = self_attention(query_(x), key_(x), value_(x), group_size, valid);
  auto h = layer_norm(add(x, out_(attn)), ln1_gamma_, ln1_beta_);
  auto f = ffn_out_(relu(ffn_in_(h)));
  return layer_norm(add(h, f), ln2_gamma_, ln2_beta_);
}

}  // namespace lorex::diff
