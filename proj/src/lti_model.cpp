#include "bmpc/lti_model.hpp"

#include "bmpc/linalg.hpp"

#include <sstream>

namespace bmpc {

namespace {

std::string shape(const Matrix& a) {
    std::ostringstream os;
    os << a.rows() << "x" << a.cols();
    return os.str();
}

bool is_symmetric(const Matrix& a, double tol) {
    return a.rows() == a.cols() &&
           (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * (1.0 + a.cwiseAbs().maxCoeff());
}

void require_psd(const Matrix& a, Index size, const char* name) {
    if (a.rows() != size || a.cols() != size) {
        throw Error(ErrorCode::dimension_mismatch,
                    std::string(name) + " must be " + std::to_string(size) + "x" +
                        std::to_string(size) + ", got " + shape(a));
    }
    if (!is_symmetric(a, 1e-12)) {
        throw Error(ErrorCode::not_positive_definite, std::string(name) + " is not symmetric");
    }
    const double scale = 1.0 + a.cwiseAbs().maxCoeff();
    if (linalg::min_eigenvalue(a) < -1e-12 * scale) {
        throw Error(ErrorCode::not_positive_definite,
                    std::string(name) + " is not positive semidefinite");
    }
}

void require_pd(const Matrix& a, Index size, const char* name) {
    if (a.rows() != size || a.cols() != size) {
        throw Error(ErrorCode::dimension_mismatch,
                    std::string(name) + " must be " + std::to_string(size) + "x" +
                        std::to_string(size) + ", got " + shape(a));
    }
    if (!is_symmetric(a, 1e-12)) {
        throw Error(ErrorCode::not_positive_definite, std::string(name) + " is not symmetric");
    }
    Eigen::LLT<Matrix> llt(linalg::symmetrize(a));
    if (llt.info() != Eigen::Success) {
        throw Error(ErrorCode::not_positive_definite,
                    std::string(name) + " is not positive definite");
    }
}

}  // namespace

void check_plant_dimensions(const Matrix& A, const Matrix& B) {
    if (A.rows() < 1 || A.rows() != A.cols()) {
        throw Error(ErrorCode::dimension_mismatch, "A must be square with n >= 1, got " + shape(A));
    }
    if (B.rows() != A.rows() || B.cols() < 1) {
        throw Error(ErrorCode::dimension_mismatch,
                    "B must be " + std::to_string(A.rows()) + "xm with m >= 1, got " + shape(B));
    }
}

namespace {

Matrix build_s(const Matrix& A, const Matrix& B) {
    const Index n = A.rows();
    Matrix S(n, n + B.cols());
    S << Matrix::Identity(n, n) - A, -B;
    return S;
}

}  // namespace

bool check_full_row_rank(const Matrix& A, const Matrix& B, std::optional<double> rtol) {
    check_plant_dimensions(A, B);
    return linalg::numerical_rank(build_s(A, B), rtol).rank == A.rows();
}

bool check_full_row_rank(const LtiPlant& plant, std::optional<double> rtol) {
    return check_full_row_rank(plant.A(), plant.B(), rtol);
}

LtiPlant::LtiPlant(Matrix A, Matrix B, std::optional<double> rank_rtol)
    : A_(std::move(A)), B_(std::move(B)) {
    check_plant_dimensions(A_, B_);
    if (!check_full_row_rank(A_, B_, rank_rtol)) {
        throw Error(ErrorCode::rank_deficient,
                    "[I - A, -B] does not have full row rank; steady states are not "
                    "parameterizable by an m-dimensional basis");
    }
}

Matrix LtiPlant::steady_state_operator() const { return build_s(A_, B_); }

SteadyStateBasis steady_state_basis(const LtiPlant& plant, std::optional<double> rtol) {
    const Matrix S = plant.steady_state_operator();
    const double rel = rtol.value_or(linalg::default_rank_rtol(S.rows(), S.cols()));
    const auto rank = linalg::numerical_rank(S, rel);
    if (rank.rank != plant.n()) {
        throw Error(ErrorCode::rank_deficient, "[I - A, -B] is rank deficient at the given tolerance");
    }
    SteadyStateBasis basis;
    basis.Z = linalg::null_space(S, rel);
    basis.tol = rel;
    basis.n = plant.n();
    basis.m = plant.m();
    if (basis.Z.cols() != plant.m()) {
        throw Error(ErrorCode::rank_deficient,
                    "kernel of [I - A, -B] has dimension " + std::to_string(basis.Z.cols()) +
                        ", expected " + std::to_string(plant.m()));
    }
    return basis;
}

Vector PredictionModel::predict(const Vector& U, const Vector& x0) const {
    return Abar * x0 + Bbar * U;
}

double PredictionModel::lower_objective(const Vector& U, const Vector& Theta,
                                        const Vector& x0) const {
    const Vector ex = predict(U, x0) - Zxbar * Theta;
    const Vector eu = U - Zubar * Theta;
    return 0.5 * ex.dot(Qbar * ex) + 0.5 * eu.dot(Rbar * eu);
}

Vector PredictionModel::lower_gradient(const Vector& U, const Vector& Theta,
                                       const Vector& x0) const {
    return Hlow * U - Gamma * Theta + x0_gain * x0;
}

PredictionModel prediction_model(const LtiPlant& plant, const SteadyStateBasis& basis, Index N,
                                 const Matrix& Qbar, const Matrix& Rbar) {
    if (N < 1) {
        throw Error(ErrorCode::dimension_mismatch, "horizon N must be >= 1");
    }
    const Index n = plant.n();
    const Index m = plant.m();
    if (basis.Z.rows() != n + m || basis.Z.cols() != m) {
        throw Error(ErrorCode::dimension_mismatch, "steady-state basis does not match the plant");
    }
    require_psd(Qbar, N * n, "Qbar");
    require_pd(Rbar, N * m, "Rbar");

    PredictionModel pm;
    pm.N = N;
    pm.n = n;
    pm.m = m;
    pm.A = plant.A();
    pm.B = plant.B();
    pm.Abar = Matrix::Zero(N * n, n);
    pm.Bbar = Matrix::Zero(N * n, N * m);

    // powers[k] = A^k
    std::vector<Matrix> powers(N + 1);
    powers[0] = Matrix::Identity(n, n);
    for (Index k = 1; k <= N; ++k) {
        powers[k] = plant.A() * powers[k - 1];
    }
    for (Index k = 0; k < N; ++k) {
        pm.Abar.block(k * n, 0, n, n) = powers[k + 1];
        for (Index j = 0; j <= k; ++j) {
            pm.Bbar.block(k * n, j * m, n, m) = powers[k - j] * plant.B();
        }
    }
    const Matrix IN = Matrix::Identity(N, N);
    pm.Zxbar = linalg::kron(IN, basis.Zx());
    pm.Zubar = linalg::kron(IN, basis.Zu());
    pm.Qbar = linalg::symmetrize(Qbar);
    pm.Rbar = linalg::symmetrize(Rbar);

    const Matrix BtQ = pm.Bbar.transpose() * pm.Qbar;
    pm.Gamma = BtQ * pm.Zxbar + pm.Rbar * pm.Zubar;
    pm.Hlow = linalg::symmetrize(BtQ * pm.Bbar + pm.Rbar);
    pm.x0_gain = BtQ * pm.Abar;
    pm.hlow_llt.compute(pm.Hlow);
    if (pm.hlow_llt.info() != Eigen::Success) {
        throw Error(ErrorCode::not_positive_definite, "Bbar' Qbar Bbar + Rbar is not positive definite");
    }
    pm.gamma_lu.compute(pm.Gamma);
    return pm;
}

std::pair<Matrix, Matrix> blkdiag_weights(const Matrix& Q, const Matrix& P, const Matrix& R,
                                          Index N) {
    if (N < 1) {
        throw Error(ErrorCode::dimension_mismatch, "horizon N must be >= 1");
    }
    const Index n = Q.rows();
    require_psd(Q, n, "Q");
    require_psd(P, n, "P");
    require_pd(R, R.rows(), "R");
    std::vector<Matrix> qs(static_cast<size_t>(N - 1), Q);
    qs.push_back(P);
    std::vector<Matrix> rs(static_cast<size_t>(N), R);
    return {linalg::blkdiag(qs), linalg::blkdiag(rs)};
}

GammaCheck check_gamma_nonsingular(const PredictionModel& model, double rtol) {
    GammaCheck out;
    if (model.Gamma.size() == 0) {
        return out;
    }
    Eigen::JacobiSVD<Matrix> svd(model.Gamma);
    const Vector& s = svd.singularValues();
    const double smax = s(0);
    const double smin = s(s.size() - 1);
    out.ratio = smax > 0.0 ? smin / smax : 0.0;
    out.nonsingular = smax > 0.0 && smin > rtol * smax;
    return out;
}

}  // namespace bmpc
