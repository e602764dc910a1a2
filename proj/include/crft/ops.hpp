#pragma once

#include <span>
#include <vector>

#include "crft/tape.hpp"

// Differentiable operations recorded on a Tape. Matrices are rank-2 tensors,
// vectors rank-1; all shapes are checked and mismatches throw ShapeError.
namespace crft::ops {

/// a[m,k] * b[k,n]
Var matmul(Tape& t, Var a, Var b);
/// a[m,k] * b[n,k]^T
Var matmul_nt(Tape& t, Var a, Var b);

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
/// x[n,d] + b[d] broadcast over rows.
Var add_row(Tape& t, Var x, Var b);
Var sum(Tape& t, Var a);

Var gelu(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5);

/// Row-wise softmax with entries above the diagonal masked. Masked entries
/// of the result are exactly zero.
Var softmax_causal(Tape& t, Var scores);

/// Mean negative log-likelihood over positions whose label is >= 0.
/// A label of -1 marks an unscored position.
Var cross_entropy(Tape& t, Var logits, std::span<const int> labels);

/// Rows of `table` selected by `ids`.
Var embedding(Tape& t, Var table, std::span<const int> ids);
Var slice_rows(Tape& t, Var x, std::size_t begin, std::size_t count);
Var slice_cols(Tape& t, Var x, std::size_t begin, std::size_t count);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var gather_rows(Tape& t, Var x, std::span<const int> rows);
/// Copy of x with delta[k] added to row rows[k].
Var scatter_add_rows(Tape& t, Var x, std::span<const int> rows, Var delta);

}  // namespace crft::ops
