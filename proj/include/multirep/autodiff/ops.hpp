#pragma once

#include <cstdint>
#include <span>
#include <type_traits>
#include <vector>

#include "multirep/autodiff/tensor.hpp"
#include "multirep/random.hpp"

// Differentiable operations. Every op checks shapes, rejects non-finite
// results with NumericalError, and records a backward closure on the active
// tape when any input requires a gradient.

namespace multirep::ad {

template <typename T>
using Real = std::type_identity_t<T>;

// Linear algebra.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// a · bᵀ for a [m×k], b [n×k].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

// Elementwise.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x [n×d] + bias [d], added to every row.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, Real<T> factor);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
/// Natural log; non-positive inputs are a NumericalError.
template <typename T>
Tensor<T> log(const Tensor<T>& x);
/// Tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

// Reductions and structure.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Rows of x [n×d] at `rows`, in order; repeats allowed.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows);
/// Token-embedding lookup; ids outside the table are a DimensionError.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);
/// x [n×c] → [n], element x[i, cols[i]].
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::size_t> cols);
/// v [n] → n×n matrix with v on the diagonal.
template <typename T>
Tensor<T> diag_embed(const Tensor<T>& v);

// Normalization and probabilities.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Real<T> eps);
/// Softmax along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
/// Row softmax of scores [R×T] where row r belongs to sequence
/// r / rows_per_sequence and key_mask [S×T] marks the attendable columns.
/// Masked columns get probability exactly 0.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::span<const std::uint8_t> key_mask,
                         std::size_t rows_per_sequence);
/// x [n×c] → [n], log Σ_j exp(x[i,j]).
template <typename T>
Tensor<T> logsumexp_rows(const Tensor<T>& x);

// Similarity.
template <typename T>
Tensor<T> cosine(const Tensor<T>& u, const Tensor<T>& v);
/// Each row of x divided by its L2 norm.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x);

/// Smallest norm accepted by cosine and l2_normalize_rows.
inline constexpr double kMinNorm = 1e-8;

// Stochastic.
/// Inverted dropout: in train mode each element is kept with probability
/// 1 - rate (one block of `stream`) and survivors are scaled by 1/(1 - rate).
/// Eval mode and rate 0 return x unchanged without consuming the stream.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, SeedStream& stream);
/// Dropout with an explicit keep mask (1 = keep).
template <typename T>
Tensor<T> apply_dropout_mask(const Tensor<T>& x, std::span<const std::uint8_t> keep, double rate);
/// The keep mask dropout() would draw for `count` elements from block `key`.
std::vector<std::uint8_t> dropout_keep_mask(std::uint64_t key, std::size_t count, double rate);

// Multi-head attention over packed sequences: rows b*seq + i of q/k/v
// [batch*seq × d] hold token i of sequence b, head h owns columns
// [h*d/heads, (h+1)*d/heads).
/// → [batch*heads*seq × seq], q_i·k_j / sqrt(d/heads) per head.
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t batch,
                           std::size_t seq, std::size_t heads);
/// probs [batch*heads*seq × seq], v [batch*seq × d] → [batch*seq × d].
template <typename T>
Tensor<T> attention_context(const Tensor<T>& probs, const Tensor<T>& v, std::size_t batch,
                            std::size_t seq, std::size_t heads);

}  // namespace multirep::ad
