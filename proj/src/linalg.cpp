#include "bmpc/linalg.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>

namespace bmpc {

const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::dimension_mismatch: return "dimension_mismatch";
        case ErrorCode::rank_deficient: return "rank_deficient";
        case ErrorCode::not_positive_definite: return "not_positive_definite";
        case ErrorCode::singular_gamma: return "singular_gamma";
        case ErrorCode::infeasible: return "infeasible";
        case ErrorCode::unbounded: return "unbounded";
        case ErrorCode::max_iterations: return "max_iterations";
        case ErrorCode::numerical: return "numerical";
        case ErrorCode::cap_exceeded: return "cap_exceeded";
        case ErrorCode::inclusion_violated: return "inclusion_violated";
        case ErrorCode::config: return "config";
    }
    return "unknown";
}

namespace linalg {

double default_rank_rtol(Index rows, Index cols) {
    return static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon();
}

RankInfo numerical_rank(const Matrix& a, std::optional<double> rtol) {
    RankInfo info;
    if (a.size() == 0) {
        return info;
    }
    Eigen::JacobiSVD<Matrix> svd(a);
    info.singular_values = svd.singularValues();
    info.sigma_max = info.singular_values.size() > 0 ? info.singular_values(0) : 0.0;
    const double rel = rtol.value_or(default_rank_rtol(a.rows(), a.cols()));
    info.threshold = rel * info.sigma_max;
    if (info.sigma_max <= 0.0) {
        return info;
    }
    for (Index i = 0; i < info.singular_values.size(); ++i) {
        if (info.singular_values(i) > info.threshold) {
            ++info.rank;
        }
    }
    return info;
}

void canonicalize_signs(Matrix& columns) {
    for (Index j = 0; j < columns.cols(); ++j) {
        const double scale = columns.col(j).cwiseAbs().maxCoeff();
        if (scale == 0.0) {
            continue;
        }
        // roundoff-level entries of an orthonormal column become exact zeros
        for (Index i = 0; i < columns.rows(); ++i) {
            if (std::abs(columns(i, j)) <= 1e-15 * scale) columns(i, j) = 0.0;
        }
        for (Index i = 0; i < columns.rows(); ++i) {
            const double v = columns(i, j);
            if (std::abs(v) > 1e-12 * scale) {
                if (v < 0.0) {
                    columns.col(j) *= -1.0;
                }
                break;
            }
        }
    }
}

Matrix null_space(const Matrix& a, std::optional<double> rtol) {
    const Index cols = a.cols();
    if (a.rows() == 0) {
        return Matrix::Identity(cols, cols);
    }
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeFullV);
    const Vector& s = svd.singularValues();
    const double rel = rtol.value_or(default_rank_rtol(a.rows(), a.cols()));
    const double cut = rel * (s.size() > 0 ? s(0) : 0.0);
    Index rank = 0;
    if (s.size() > 0 && s(0) > 0.0) {
        for (Index i = 0; i < s.size(); ++i) {
            if (s(i) > cut) ++rank;
        }
    }
    Matrix basis = svd.matrixV().rightCols(cols - rank);
    canonicalize_signs(basis);
    return basis;
}

Matrix orth(const Matrix& a, std::optional<double> rtol) {
    if (a.size() == 0) {
        return Matrix(a.rows(), 0);
    }
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU);
    const Vector& s = svd.singularValues();
    const double rel = rtol.value_or(default_rank_rtol(a.rows(), a.cols()));
    const double cut = rel * s(0);
    Index rank = 0;
    if (s(0) > 0.0) {
        for (Index i = 0; i < s.size(); ++i) {
            if (s(i) > cut) ++rank;
        }
    }
    Matrix basis = svd.matrixU().leftCols(rank);
    canonicalize_signs(basis);
    return basis;
}

Matrix pinv(const Matrix& a, std::optional<double> rtol) {
    if (a.size() == 0) {
        return Matrix::Zero(a.cols(), a.rows());
    }
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double rel = rtol.value_or(default_rank_rtol(a.rows(), a.cols()));
    const double cut = rel * s(0);
    Vector inv = Vector::Zero(s.size());
    for (Index i = 0; i < s.size(); ++i) {
        if (s(i) > cut && s(i) > 0.0) inv(i) = 1.0 / s(i);
    }
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

Matrix symmetrize(const Matrix& a) {
    return 0.5 * (a + a.transpose());
}

double min_eigenvalue(const Matrix& a) {
    if (a.size() == 0) {
        return std::numeric_limits<double>::infinity();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

Matrix blkdiag(const std::vector<Matrix>& blocks) {
    Index rows = 0;
    Index cols = 0;
    for (const auto& b : blocks) {
        rows += b.rows();
        cols += b.cols();
    }
    Matrix out = Matrix::Zero(rows, cols);
    Index r = 0;
    Index c = 0;
    for (const auto& b : blocks) {
        out.block(r, c, b.rows(), b.cols()) = b;
        r += b.rows();
        c += b.cols();
    }
    return out;
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i) {
        for (Index j = 0; j < a.cols(); ++j) {
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
        }
    }
    return out;
}

}  // namespace linalg
}  // namespace bmpc
