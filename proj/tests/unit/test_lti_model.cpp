#include "bmpc/linalg.hpp"
#include "bmpc/lti_model.hpp"

#include "doctest.h"
#include "support/oracles.hpp"

#include <cmath>

using namespace bmpc;
using bmpc::testing::Rng;

namespace {

LtiPlant toy_plant() {
    const double ts = 0.3;
    Matrix A(2, 2);
    A << 1.0, ts, 0.0, 1.0;
    Matrix B(2, 1);
    B << 0.5 * ts * ts, ts;
    return LtiPlant(A, B);
}

PredictionModel toy_model(Index N = 10) {
    const LtiPlant plant = toy_plant();
    const auto [Qbar, Rbar] =
        blkdiag_weights(Matrix::Identity(2, 2), Matrix::Identity(2, 2), 0.1 * Matrix::Identity(1, 1), N);
    return prediction_model(plant, steady_state_basis(plant), N, Qbar, Rbar);
}

// Random plant with spectral radius < 1 so I - A is invertible.
LtiPlant random_stable_plant(Rng& rng, Index n, Index m) {
    Matrix A = rng.matrix(n, n);
    const double rho = Eigen::EigenSolver<Matrix>(A).eigenvalues().cwiseAbs().maxCoeff();
    A *= 0.9 / std::max(rho, 1e-6);
    return LtiPlant(A, rng.matrix(n, m));
}

}  // namespace

TEST_CASE("full row rank check") {
    const LtiPlant toy = toy_plant();
    CHECK(check_full_row_rank(toy));
    CHECK_FALSE(check_full_row_rank(Matrix::Identity(2, 2), Matrix::Zero(2, 1)));
    CHECK_THROWS_AS(LtiPlant(Matrix::Identity(2, 2), Matrix::Zero(2, 1)), Error);
    CHECK_THROWS_AS(check_full_row_rank(Matrix::Identity(2, 2), Matrix::Zero(3, 1)), Error);

    // Controllable pair, rank from an independent decomposition (pivoted QR).
    Rng rng(3);
    for (int t = 0; t < 10; ++t) {
        const Matrix A = rng.matrix(4, 4);
        const Matrix B = rng.matrix(4, 2);
        Matrix S(4, 6);
        S << Matrix::Identity(4, 4) - A, -B;
        Eigen::FullPivHouseholderQR<Matrix> qr(S);
        qr.setThreshold(1e-9);
        CHECK(check_full_row_rank(A, B, 1e-9) == (qr.rank() == 4));
    }
}

TEST_CASE("steady-state basis of the double integrator") {
    const auto basis = steady_state_basis(toy_plant());
    REQUIRE(basis.Z.cols() == 1);
    // span{[1; 0; 0]} with the nonnegative first-entry convention
    CHECK(basis.Z(0, 0) == doctest::Approx(1.0));
    CHECK(std::abs(basis.Z(1, 0)) < 1e-14);
    CHECK(std::abs(basis.Z(2, 0)) < 1e-14);
}

TEST_CASE("steady-state basis of a scalar plant") {
    Matrix A(1, 1);
    A << 0.5;
    Matrix B(1, 1);
    B << 1.0;
    const auto basis = steady_state_basis(LtiPlant(A, B));
    CHECK(basis.Z(0, 0) == doctest::Approx(2.0 / std::sqrt(5.0)));
    CHECK(basis.Z(1, 0) == doctest::Approx(1.0 / std::sqrt(5.0)));
}

TEST_CASE("steady-state basis spans the (I - A)^-1 B parameterization") {
    Rng rng(5);
    for (int t = 0; t < 10; ++t) {
        const LtiPlant plant = random_stable_plant(rng, 3, 2);
        const auto basis = steady_state_basis(plant);
        Matrix ref(5, 2);
        ref << (Matrix::Identity(3, 3) - plant.A()).inverse() * plant.B(), Matrix::Identity(2, 2);
        // Same column space: projecting ref onto span(Z) loses nothing.
        const Matrix proj = basis.Z * (basis.Z.transpose() * ref);
        CHECK((proj - ref).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((basis.Z.transpose() * basis.Z - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-10);
        const Matrix S = plant.steady_state_operator();
        CHECK((S * basis.Z).cwiseAbs().maxCoeff() <= basis.tol * linalg::numerical_rank(S).sigma_max + 1e-14);
    }
}

TEST_CASE("steady-state pairs satisfy the plant equation") {
    Rng rng(6);
    for (int t = 0; t < 20; ++t) {
        const LtiPlant plant(rng.matrix(3, 3, -1.5, 1.5), rng.matrix(3, 2));
        const auto basis = steady_state_basis(plant);
        const Vector theta = rng.vector(2, -5.0, 5.0);
        const Vector xs = basis.Zx() * theta;
        const Vector us = basis.Zu() * theta;
        CHECK((plant.step(xs, us) - xs).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("steady-state basis is deterministic") {
    Rng rng(8);
    const LtiPlant plant(rng.matrix(4, 4), rng.matrix(4, 2));
    const auto a = steady_state_basis(plant);
    const auto b = steady_state_basis(plant);
    CHECK(a.Z == b.Z);
}

TEST_CASE("block-diagonal weights") {
    Matrix R(1, 1);
    R << 0.1;
    const auto [Q1, R1] = blkdiag_weights(2.0 * Matrix::Identity(2, 2), 3.0 * Matrix::Identity(2, 2), R, 1);
    CHECK(Q1 == 3.0 * Matrix::Identity(2, 2));
    CHECK(R1 == R);

    const auto [Qbar, Rbar] = blkdiag_weights(Matrix::Identity(2, 2), Matrix::Identity(2, 2), R, 10);
    CHECK(Qbar == Matrix::Identity(20, 20));
    CHECK(Rbar.isApprox(0.1 * Matrix::Identity(10, 10)));

    const auto [Q3, R3] = blkdiag_weights(2.0 * Matrix::Identity(2, 2), 3.0 * Matrix::Identity(2, 2),
                                          Matrix::Identity(1, 1), 3);
    CHECK(Q3.trace() == doctest::Approx(2.0 * 2 * 2 + 3.0 * 2));
    CHECK(R3.trace() == doctest::Approx(3.0));

    CHECK_THROWS_AS(blkdiag_weights(Matrix::Identity(2, 2), Matrix::Identity(2, 2), -R, 3), Error);
}

TEST_CASE("one-step prediction model") {
    const PredictionModel pm = toy_model(1);
    const Matrix Q = Matrix::Identity(2, 2);
    const auto basis = steady_state_basis(toy_plant());
    CHECK(pm.Abar.isApprox(pm.A));
    CHECK(pm.Bbar.isApprox(pm.B));
    const Matrix gamma = pm.B.transpose() * Q * basis.Zx() + 0.1 * basis.Zu();
    CHECK(pm.Gamma.isApprox(gamma));
}

TEST_CASE("toy prediction model satisfies the nonsingularity check") {
    const PredictionModel pm = toy_model();
    const auto check = check_gamma_nonsingular(pm);
    CHECK(check.nonsingular);
    CHECK(check.ratio > 0.0);
    CHECK(pm.Gamma.rows() == 10);
}

TEST_CASE("singular Gamma is detected") {
    // Zu = 0 and Qbar = 0 on the states leaves Gamma = 0.
    const LtiPlant plant = toy_plant();
    const auto basis = steady_state_basis(plant);
    const PredictionModel pm =
        prediction_model(plant, basis, 3, Matrix::Zero(6, 6), Matrix::Identity(3, 3));
    CHECK_FALSE(check_gamma_nonsingular(pm).nonsingular);

    // Rank-deficient but nonzero: only the terminal state is weighted.
    Matrix Qbar = Matrix::Zero(6, 6);
    Qbar.bottomRightCorner(2, 2) = Matrix::Identity(2, 2);
    const PredictionModel pm2 = prediction_model(plant, basis, 3, Qbar, 0.1 * Matrix::Identity(3, 3));
    Eigen::FullPivLU<Matrix> lu(pm2.Gamma);
    CHECK(lu.rank() < 3);
    CHECK_FALSE(check_gamma_nonsingular(pm2).nonsingular);
}

TEST_CASE("prediction stack matches step-by-step recursion") {
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        const Index n = rng.integer(1, 4);
        const Index m = rng.integer(1, 3);
        const Index N = rng.integer(1, 50);
        const LtiPlant plant = random_stable_plant(rng, n, m);
        const auto [Qbar, Rbar] = blkdiag_weights(Matrix::Identity(n, n), Matrix::Identity(n, n),
                                                  Matrix::Identity(m, m), N);
        const PredictionModel pm = prediction_model(plant, steady_state_basis(plant), N, Qbar, Rbar);
        const Vector U = rng.vector(N * m);
        const Vector x0 = rng.vector(n);
        const Vector X = testing::simulate_stack(plant.A(), plant.B(), x0, U);
        CHECK((pm.predict(U, x0) - X).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + X.cwiseAbs().maxCoeff()));
    }
}

TEST_CASE("lower gradient matches finite differences") {
    Rng rng(10);
    const LtiPlant plant = random_stable_plant(rng, 3, 2);
    const auto [Qbar, Rbar] = blkdiag_weights(rng.spd(3), rng.spd(3), rng.spd(2), 5);
    const PredictionModel pm = prediction_model(plant, steady_state_basis(plant), 5, Qbar, Rbar);
    const Vector U = rng.vector(10);
    const Vector Theta = rng.vector(10);
    const Vector x0 = rng.vector(3);
    const Vector g = pm.lower_gradient(U, Theta, x0);
    const Vector fd = testing::finite_difference_gradient(
        [&](const Vector& u) { return pm.lower_objective(u, Theta, x0); }, U);
    CHECK((g - fd).norm() <= 1e-5 * std::max(1.0, g.norm()));
}

TEST_CASE("invalid weights are rejected") {
    const LtiPlant plant = toy_plant();
    const auto basis = steady_state_basis(plant);
    CHECK_THROWS_AS(prediction_model(plant, basis, 2, Matrix::Identity(4, 4), Matrix::Zero(2, 2)), Error);
    CHECK_THROWS_AS(prediction_model(plant, basis, 2, Matrix::Identity(3, 3), Matrix::Identity(2, 2)), Error);
    CHECK_THROWS_AS(prediction_model(plant, basis, 0, Matrix(), Matrix()), Error);
}
