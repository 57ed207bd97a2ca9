#include "bmpc/blocking.hpp"

#include "bmpc/formulations.hpp"
#include "bmpc/linalg.hpp"

#include <sstream>

namespace bmpc {

BlockingMatrix::BlockingMatrix(Matrix M, std::optional<double> rtol) : M_(std::move(M)) {
    if (M_.cols() == 0) return;
    const auto info = linalg::numerical_rank(M_, rtol);
    if (info.rank != M_.cols()) {
        std::ostringstream os;
        os << "blocking matrix " << M_.rows() << "x" << M_.cols() << " has rank " << info.rank
           << ", full column rank required";
        throw Error(ErrorCode::rank_deficient, os.str());
    }
}

BlockingMatrix one_block(Index N, Index m) { return leading_free(1, N, m); }

BlockingMatrix leading_free(Index i, Index N, Index m) {
    if (N < 1 || m < 1 || i < 1 || i > N) {
        throw Error(ErrorCode::dimension_mismatch,
                    "leading_free needs 1 <= i <= N, got i=" + std::to_string(i) +
                        ", N=" + std::to_string(N));
    }
    Matrix pattern = Matrix::Zero(N, i);
    for (Index k = 0; k < N; ++k) pattern(k, std::min(k, i - 1)) = 1.0;
    return BlockingMatrix(linalg::kron(pattern, Matrix::Identity(m, m)));
}

bool image_contains(const Matrix& M, const Matrix& Mhat, std::optional<double> rtol) {
    if (M.rows() != Mhat.rows()) {
        throw Error(ErrorCode::dimension_mismatch, "image_contains: row counts differ");
    }
    Matrix joint(M.rows(), M.cols() + Mhat.cols());
    joint << M, Mhat;
    return linalg::numerical_rank(joint, rtol).rank == linalg::numerical_rank(Mhat, rtol).rank;
}

Matrix restriction_map(const Matrix& M, const Matrix& Mhat) {
    if (M.rows() != Mhat.rows()) {
        throw Error(ErrorCode::dimension_mismatch, "restriction_map: row counts differ");
    }
    const Matrix T = linalg::pinv(Mhat) * M;
    const double residual = (Mhat * T - M).norm();
    if (residual > 1e-9 * std::max(M.norm(), 1.0)) {
        std::ostringstream os;
        os << "im(M) is not contained in im(Mhat): |Mhat T - M| = " << residual;
        throw Error(ErrorCode::inclusion_violated, os.str());
    }
    return T;
}

ConstructedBlocking construct_from_p0(const BilevelInstance& inst, const std::vector<Vector>& samples,
                                      double rtol) {
    if (samples.empty()) {
        throw Error(ErrorCode::dimension_mismatch, "construct_from_p0 needs at least one sample");
    }
    const SteadyStateTarget ss = solve_p0(inst);
    const Vector Theta0 = hmpc_reference(ss.theta, inst.N());
    Matrix thetas(inst.nu(), static_cast<Index>(samples.size()));
    std::vector<bool> gu_ok;
    gu_ok.reserve(samples.size());
    const double feas = QpTolerances{}.feas;
    for (size_t i = 0; i < samples.size(); ++i) {
        const Vector& x0 = samples[i];
        const SolveReport low = solve_lower(inst, Theta0, x0);
        thetas.col(static_cast<Index>(i)) = theta_star_map(inst, low.U, x0);
        const Vector gu = inst.upper.evaluate(low.U, x0);
        gu_ok.push_back(gu.size() == 0 || gu.maxCoeff() <= feas);
    }
    const auto info = linalg::numerical_rank(thetas, rtol);
    Matrix basis = linalg::orth(thetas, rtol);
    return ConstructedBlocking{BlockingMatrix(std::move(basis)), std::move(thetas), std::move(gu_ok),
                               info.threshold};
}

}  // namespace bmpc
