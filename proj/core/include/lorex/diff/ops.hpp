#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lorex/diff/tensor.hpp"

// Differentiable operations over row-major matrices. Rank-0 and rank-1 tensors
// behave as a single row. Every op validates extents and throws ShapeError
// naming itself on mismatch.
namespace lorex::diff {

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T

// Elementwise binary ops. Each operand is either the full [m,n] shape, a row
// [1,n], a column [m,1] or a scalar; the result takes the larger extents.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// Elementwise unary ops.
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);

// Row-wise normalisations.
Tensor softmax(const Tensor& a);
/// Softmax over entries with mask != 0; masked entries are exactly zero.
/// `mask` has one byte per element. A row with no allowed entry is an error.
Tensor masked_softmax(const Tensor& a, std::span<const std::uint8_t> mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Reductions and pooling.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Mean over rows: [m,n] -> [1,n].
Tensor mean_pool(const Tensor& a);
/// `a` holds `groups` consecutive blocks of `group_size` rows; averages the rows
/// whose `valid` byte is set. A block without valid rows pools to zero.
Tensor segment_mean(const Tensor& a, std::size_t group_size, std::span<const std::uint8_t> valid);

// Structural ops.
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
/// Same values under a new shape with equal element count.
Tensor reshape(const Tensor& a, Shape shape);
/// Forward value `hard`, backward identity into `soft` (straight-through estimator).
Tensor straight_through(const Tensor& soft, std::vector<double> hard);
/// Rows of `table` selected by `ids`: [ids.size(), d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
/// out[r] = a[r, index[r]] as a column [m,1].
Tensor pick(const Tensor& a, std::span<const int> index);

// Losses (scalar outputs).
/// Sum of squared differences.
Tensor squared_error(const Tensor& prediction, const Tensor& target);
/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Recurrent and attention blocks.
/// GRU update from pre-activations gi = x W_ih + b_ih and gh = h W_hh + b_hh,
/// both [B, 3H] in (reset, update, new) order, and the previous state h [B, H].
Tensor gru_gates(const Tensor& gi, const Tensor& gh, const Tensor& h);
/// Single-head scaled dot-product attention applied independently to `groups`
/// blocks of `group_size` rows. Keys whose `key_valid` byte is zero are ignored;
/// a query with no valid key yields a zero row.
Tensor self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t group_size,
                      std::span<const std::uint8_t> key_valid);

}  // namespace lorex::diff
