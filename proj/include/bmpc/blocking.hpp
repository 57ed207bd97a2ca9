#pragma once

#include "bmpc/types.hpp"

#include <optional>
#include <vector>

namespace bmpc {

struct BilevelInstance;

/// Full-column-rank M restricting the reference stack to Theta = M Phi.
class BlockingMatrix {
public:
    /// Throws rank_deficient unless rank(M) == cols(M) at rtol.
    explicit BlockingMatrix(Matrix M, std::optional<double> rtol = std::nullopt);

    const Matrix& matrix() const { return M_; }
    Index rows() const { return M_.rows(); }
    Index p() const { return M_.cols(); }

    Vector expand(const Vector& phi) const { return M_ * phi; }

private:
    Matrix M_;
};

/// M_1 = 1_N (x) I_m.
BlockingMatrix one_block(Index N, Index m);

/// M_i = [I_i; [0, 1_{N-i}]] (x) I_m: first i steps free, the rest held at step i-1.
BlockingMatrix leading_free(Index i, Index N, Index m);

/// im(M) subset of im(Mhat), tested as rank(Mhat) == rank([M, Mhat]).
bool image_contains(const Matrix& M, const Matrix& Mhat, std::optional<double> rtol = std::nullopt);
inline bool image_contains(const BlockingMatrix& M, const BlockingMatrix& Mhat,
                           std::optional<double> rtol = std::nullopt) {
    return image_contains(M.matrix(), Mhat.matrix(), rtol);
}

/// T = pinv(Mhat) M with M = Mhat T verified to 1e-9 |M|.
Matrix restriction_map(const Matrix& M, const Matrix& Mhat);
inline Matrix restriction_map(const BlockingMatrix& M, const BlockingMatrix& Mhat) {
    return restriction_map(M.matrix(), Mhat.matrix());
}

struct ConstructedBlocking {
    BlockingMatrix M;
    Matrix thetas;                   // Nm x samples, column i = Theta*(U0(x_i); x_i)
    std::vector<bool> gu_satisfied;  // G_u(U0(x_i); x_i) <= tol_feas per sample
    double tol = 0.0;                // absolute singular-value cut used
};

/// Orthonormal basis of span{Theta*(U0(x_i); x_i)} over the samples.
///
/// rtol is relative to the largest singular value of the stacked samples.
/// When every sampled reference is zero the result has p = 0 columns.
/// Throws infeasible if P0 or a lower problem is infeasible.
ConstructedBlocking construct_from_p0(const BilevelInstance& inst, const std::vector<Vector>& samples,
                                      double rtol = 1e-8);

}  // namespace bmpc
