#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "palab/graph.hpp"

namespace palab::ops {

// Per-element costs charged to Graph::flops() for non-matmul ops. The
// accounting module's closed-form FLOPs estimate uses the same constants.
inline constexpr std::uint64_t kSoftmaxFlopsPerElement = 5;   // max, sub, exp, sum, div
inline constexpr std::uint64_t kLayerNormFlopsPerElement = 8;
inline constexpr std::uint64_t kTanhFlopsPerElement = 1;

// a[m,k] x b[k,n]
Var matmul(Graph& g, Var a, Var b);
// a holds `batches` stacked [m,k] blocks, b holds stacked [k,n] blocks.
Var batched_matmul(Graph& g, Var a, Var b, std::size_t batches);
// a holds stacked [m,k] blocks, b stacked [n,k] blocks; block i is a_i * b_iᵀ.
Var batched_matmul_bt(Graph& g, Var a, Var b, std::size_t batches);

Var add(Graph& g, Var a, Var b);
// x[m,n] + bias[n] broadcast over rows.
Var add_bias(Graph& g, Var x, Var bias);
Var add_constant(Graph& g, Var x, const Tensor& c);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
// x * s[index] for one entry of a (typically mask) tensor s.
Var scale_by_entry(Graph& g, Var x, Var s, std::size_t index);

Var relu(Graph& g, Var x);
Var tanh(Graph& g, Var x);
Var softmax_lastdim(Graph& g, Var x);
Var layernorm(Graph& g, Var x, Var gamma, Var beta, double eps);

enum class Reduction { kMean, kSum };
// Negative log-softmax of the labelled class per row, averaged or summed.
Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> labels,
                  Reduction reduction = Reduction::kMean);

// Rows of table[v,d] picked by ids.
Var embedding(Graph& g, Var table, std::span<const std::size_t> ids);
Var slice_cols(Graph& g, Var x, std::size_t begin, std::size_t end);
// Concatenation along the last axis; `rows` fixes the result height so an
// empty part list yields an [rows, 0] value.
Var concat_cols(Graph& g, std::span<const Var> parts, std::size_t rows);
Var select_rows(Graph& g, Var x, std::span<const std::size_t> rows);
Var sum(Graph& g, Var x);

}  // namespace palab::ops
