#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "moh/numcore/tape.hpp"

namespace moh::nc {

/// Additive-mask sentinel for blocked attention entries. Finite so that
/// blocked scores never produce NaN through inf - inf.
template <typename T>
constexpr T blocked_value() {
  return T(-1e9);
}

// Elementwise and shape ops. Binary ops require identical shapes.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
/// x[R x C] + row[C], broadcast over rows.
template <typename T> Var<T> add_row(Var<T> x, Var<T> row);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> abs(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);
/// tanh-approximated GELU.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);

// Reductions.
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// Scalar sum_i w_i * a_i with a constant weight tensor of the same size.
template <typename T> Var<T> weighted_sum(Var<T> a, const Tensor<T>& w);
/// out[g] = sum over i with group[i] == g of w_i * a_i; group ids < groups, or -1 to skip.
template <typename T>
Var<T> grouped_weighted_sum(Var<T> a, const Tensor<T>& w, std::span<const int> group,
                            std::size_t groups);
/// Sum of several scalars with fixed coefficients.
template <typename T>
Var<T> linear_combination(std::span<const Var<T>> terms, std::span<const T> coeffs);

// Linear algebra.
/// a[m x k] * b[k x n]; leading dims of a are folded into m.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// x[R x in] * w[in x out] + b[out]; pass an invalid Var to skip the bias.
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

// Normalizations over the last axis.
template <typename T> Var<T> softmax(Var<T> x);
template <typename T> Var<T> log_softmax(Var<T> x);
/// Divides each row by its sum (rows must have positive sums).
template <typename T> Var<T> normalize_rows(Var<T> x);

/// Softmax along `axis` restricted to entries with mask != 0. Masked entries
/// get weight exactly 0. A slice with no valid entry is an error.
template <typename T>
Var<T> masked_softmax(Var<T> logits, const Tensor<std::uint8_t>& mask, std::size_t axis);

// Indexing.
/// out.flat[i] = x.flat[index[i]].
template <typename T> Var<T> take(Var<T> x, std::vector<std::size_t> index, Shape out_shape);
/// Row -1 yields a zero row.
template <typename T> Var<T> gather_rows(Var<T> x, std::vector<int> rows);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
/// out[r] = sum_n w[r, n] * x[r * N + n]; w is [R x N], x is [R*N x D].
template <typename T> Var<T> mix_rows(Var<T> w, Var<T> x);

// Attention.

/// Additive mask for one attention group plus per-query validity. Invalid
/// query rows neither attend nor produce output (their result is zero).
template <typename T>
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<T> additive;                // queries x keys; 0 or blocked_value()
  std::vector<std::uint8_t> query_valid;  // queries
};

/// One independent attention problem inside a row-stacked batch.
struct AttentionGroup {
  std::vector<int> query_rows;
  std::vector<int> key_rows;
  int mask = -1;  // index into AttentionLayout::masks; -1 means unmasked
};

template <typename T>
struct AttentionLayout {
  std::vector<AttentionGroup> groups;
  std::vector<AttentionMask<T>> masks;
};

/// Single-head softmax(q k^T / sqrt(d) + mask) v for q, k, v of shape [L x d].
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const Tensor<T>& additive_mask);

/// Multi-head attention over row-stacked q, k, v [R x d]. Each group attends
/// from its query rows to its key rows; heads split the columns evenly.
/// Rows not covered by any group's queries produce zeros.
template <typename T>
Var<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v,
                            std::shared_ptr<const AttentionLayout<T>> layout, std::size_t heads);

}  // namespace moh::nc
