#pragma once

#include "bmpc/types.hpp"

#include <optional>
#include <vector>

// Dense rank-revealing helpers shared by the steady-state parameterization
// and the blocking-matrix algebra. All tolerances here are relative to the
// largest singular value unless stated otherwise.
namespace bmpc::linalg {

/// Standard numerical-rank rule: max(rows, cols) * machine epsilon.
double default_rank_rtol(Index rows, Index cols);

struct RankInfo {
    Index rank = 0;
    double sigma_max = 0.0;
    double threshold = 0.0;  // absolute cut applied to the singular values
    Vector singular_values;
};

/// Singular values of `a` and the count strictly above rtol * sigma_max.
RankInfo numerical_rank(const Matrix& a, std::optional<double> rtol = std::nullopt);

/// Zero out roundoff-level entries, then flip column signs so that the
/// first nonzero entry of each column is nonnegative.
void canonicalize_signs(Matrix& columns);

/// Orthonormal basis of ker(a), canonical signs. Columns = cols(a) - rank(a).
Matrix null_space(const Matrix& a, std::optional<double> rtol = std::nullopt);

/// Orthonormal basis of im(a), canonical signs. Columns = rank(a).
Matrix orth(const Matrix& a, std::optional<double> rtol = std::nullopt);

/// Moore-Penrose pseudoinverse via SVD with the same rank cut.
Matrix pinv(const Matrix& a, std::optional<double> rtol = std::nullopt);

/// Symmetric part (A + A^T) / 2.
Matrix symmetrize(const Matrix& a);

/// Smallest eigenvalue of the symmetric part of a square matrix.
double min_eigenvalue(const Matrix& a);

/// Block-diagonal concatenation.
Matrix blkdiag(const std::vector<Matrix>& blocks);

/// Kronecker product a (x) b.
Matrix kron(const Matrix& a, const Matrix& b);

}  // namespace bmpc::linalg
