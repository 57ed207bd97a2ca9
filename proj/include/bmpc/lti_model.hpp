#pragma once

#include "bmpc/types.hpp"

#include <optional>
#include <utility>

namespace bmpc {

/// Discrete-time plant x+ = A x + B u.
///
/// Construction checks dimensions and that S = [I - A, -B] has full row
/// rank, so every LtiPlant admits an m-dimensional steady-state manifold.
class LtiPlant {
public:
    LtiPlant(Matrix A, Matrix B, std::optional<double> rank_rtol = std::nullopt);

    const Matrix& A() const { return A_; }
    const Matrix& B() const { return B_; }
    Index n() const { return A_.rows(); }
    Index m() const { return B_.cols(); }

    /// S = [I - A, -B], n x (n + m).
    Matrix steady_state_operator() const;

    Vector step(const Vector& x, const Vector& u) const { return A_ * x + B_ * u; }

private:
    Matrix A_;
    Matrix B_;
};

/// Throws dimension_mismatch unless A is n x n, B is n x m, n >= 1, m >= 1.
void check_plant_dimensions(const Matrix& A, const Matrix& B);

/// sigma_n(S) > rtol * sigma_1(S) for S = [I - A, -B].
bool check_full_row_rank(const Matrix& A, const Matrix& B,
                         std::optional<double> rtol = std::nullopt);
bool check_full_row_rank(const LtiPlant& plant, std::optional<double> rtol = std::nullopt);

/// Orthonormal basis Z = [Zx; Zu] of ker S.
struct SteadyStateBasis {
    Matrix Z;
    double tol = 0.0;
    Index n = 0;
    Index m = 0;

    Matrix Zx() const { return Z.topRows(n); }
    Matrix Zu() const { return Z.bottomRows(m); }
};

SteadyStateBasis steady_state_basis(const LtiPlant& plant,
                                    std::optional<double> rtol = std::nullopt);

/// Condensed horizon data shared by every formulation. Immutable.
///
/// Stacks follow X = [x_1; ...; x_N] = Abar x0 + Bbar U and the reference
/// lift [xbar_{k+1}; ubar_k] = Z theta_k.
struct PredictionModel {
    Index N = 0;
    Index n = 0;
    Index m = 0;
    Matrix A;
    Matrix B;
    Matrix Abar;     // Nn x n
    Matrix Bbar;     // Nn x Nm
    Matrix Zxbar;    // Nn x Nm
    Matrix Zubar;    // Nm x Nm
    Matrix Qbar;     // Nn x Nn
    Matrix Rbar;     // Nm x Nm
    Matrix Gamma;    // Bbar' Qbar Zxbar + Rbar Zubar
    Matrix Hlow;     // Bbar' Qbar Bbar + Rbar
    Matrix x0_gain;  // Bbar' Qbar Abar
    Eigen::LLT<Matrix> hlow_llt;
    Eigen::PartialPivLU<Matrix> gamma_lu;

    Index nu() const { return N * m; }
    Index nx() const { return N * n; }

    /// Abar x0 + Bbar U.
    Vector predict(const Vector& U, const Vector& x0) const;

    /// F_l(U; Theta, x0) = 1/2 |X - Zxbar Theta|^2_Qbar + 1/2 |U - Zubar Theta|^2_Rbar.
    double lower_objective(const Vector& U, const Vector& Theta, const Vector& x0) const;

    /// Hlow U - Gamma Theta + x0_gain x0.
    Vector lower_gradient(const Vector& U, const Vector& Theta, const Vector& x0) const;
};

PredictionModel prediction_model(const LtiPlant& plant, const SteadyStateBasis& basis, Index N,
                                 const Matrix& Qbar, const Matrix& Rbar);

/// Qbar = blkdiag(Q, ..., Q, P) (N - 1 copies of Q), Rbar = blkdiag(R, ..., R).
std::pair<Matrix, Matrix> blkdiag_weights(const Matrix& Q, const Matrix& P, const Matrix& R,
                                          Index N);

struct GammaCheck {
    bool nonsingular = false;
    double ratio = 0.0;  // sigma_min / sigma_max
};

GammaCheck check_gamma_nonsingular(const PredictionModel& model, double rtol = 1e-10);

}  // namespace bmpc
