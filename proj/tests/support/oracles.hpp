#pragma once

// Independent reference routines used only by tests. None of these call
// into the solver paths they are used to check.

#include "bmpc/types.hpp"

#include <Eigen/LU>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <vector>

namespace bmpc::testing {

struct BruteForceQp {
    bool feasible = false;
    double value = std::numeric_limits<double>::infinity();
    Vector z;
};

/// Exhaustive active-set enumeration for a strictly convex QP: every subset
/// of inequalities is tried as an equality set, the KKT system is solved,
/// and candidates are filtered by primal feasibility and multiplier sign.
inline BruteForceQp brute_force_qp(const Matrix& H, const Vector& c, const Matrix& Aeq,
                                   const Vector& beq, const Matrix& A, const Vector& b,
                                   double tol = 1e-9) {
    const Index q = H.rows();
    const Index ne = Aeq.rows();
    const Index ni = A.rows();
    BruteForceQp best;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << ni); ++mask) {
        std::vector<Index> rows;
        for (Index i = 0; i < ni; ++i) {
            if (mask & (std::uint64_t{1} << i)) rows.push_back(i);
        }
        const Index k = ne + static_cast<Index>(rows.size());
        Matrix K = Matrix::Zero(q + k, q + k);
        Vector rhs = Vector::Zero(q + k);
        K.topLeftCorner(q, q) = H;
        rhs.head(q) = -c;
        for (Index e = 0; e < ne; ++e) {
            K.block(q + e, 0, 1, q) = Aeq.row(e);
            K.block(0, q + e, q, 1) = Aeq.row(e).transpose();
            rhs(q + e) = beq(e);
        }
        for (size_t j = 0; j < rows.size(); ++j) {
            const Index r = q + ne + static_cast<Index>(j);
            K.block(r, 0, 1, q) = A.row(rows[j]);
            K.block(0, r, q, 1) = A.row(rows[j]).transpose();
            rhs(r) = b(rows[j]);
        }
        Eigen::FullPivLU<Matrix> lu(K);
        if (lu.rank() < q + k) continue;
        const Vector sol = lu.solve(rhs);
        const Vector z = sol.head(q);
        if (ni > 0 && (A * z - b).maxCoeff() > tol * (1.0 + b.cwiseAbs().maxCoeff())) continue;
        bool signs_ok = true;
        for (size_t j = 0; j < rows.size(); ++j) {
            if (sol(q + ne + static_cast<Index>(j)) < -tol) signs_ok = false;
        }
        if (!signs_ok) continue;
        const double value = 0.5 * z.dot(H * z) + c.dot(z);
        if (value < best.value) {
            best.feasible = true;
            best.value = value;
            best.z = z;
        }
    }
    return best;
}

/// Projected gradient on min_{mu >= 0} 1/2 |t + G mu|^2_{M^-1} + o'mu.
inline Vector projected_gradient_nnls(const Matrix& G, const Vector& t, const Matrix& M,
                                      const Vector& o, int iters = 200000) {
    const Matrix Minv = M.inverse();
    const Matrix Hd = G.transpose() * Minv * G;
    const Vector cd = G.transpose() * Minv * t + o;
    const double L = Eigen::SelfAdjointEigenSolver<Matrix>(Hd).eigenvalues().maxCoeff();
    const double step = 1.0 / std::max(L, 1e-12);
    Vector mu = Vector::Zero(G.cols());
    for (int it = 0; it < iters; ++it) {
        const Vector next = (mu - step * (Hd * mu + cd)).cwiseMax(0.0);
        if ((next - mu).cwiseAbs().maxCoeff() < 1e-15) {
            mu = next;
            break;
        }
        mu = next;
    }
    return mu;
}

inline double nnls_objective(const Matrix& G, const Vector& t, const Matrix& M, const Vector& o,
                             const Vector& mu) {
    const Vector r = t + G * mu;
    return 0.5 * r.dot(M.ldlt().solve(r)) + o.dot(mu);
}

/// Central finite-difference gradient.
template <typename F>
Vector finite_difference_gradient(F&& f, const Vector& x, double h = 1e-5) {
    Vector g(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        Vector xp = x;
        Vector xm = x;
        xp(i) += h;
        xm(i) -= h;
        g(i) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return g;
}

/// x_{k+1} = A x_k + B u_k, returns [x_1; ...; x_N].
inline Vector simulate_stack(const Matrix& A, const Matrix& B, const Vector& x0, const Vector& U) {
    const Index n = A.rows();
    const Index m = B.cols();
    const Index N = U.size() / m;
    Vector X(N * n);
    Vector x = x0;
    for (Index k = 0; k < N; ++k) {
        x = A * x + B * U.segment(k * m, m);
        X.segment(k * n, n) = x;
    }
    return X;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform(double lo = -1.0, double hi = 1.0) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
    Matrix matrix(Index r, Index c, double lo = -1.0, double hi = 1.0) {
        Matrix a(r, c);
        for (Index i = 0; i < r; ++i)
            for (Index j = 0; j < c; ++j) a(i, j) = uniform(lo, hi);
        return a;
    }
    Vector vector(Index n, double lo = -1.0, double hi = 1.0) { return matrix(n, 1, lo, hi); }
    Matrix spd(Index n, double floor = 0.1) {
        const Matrix a = matrix(n, n);
        return a * a.transpose() + floor * Matrix::Identity(n, n);
    }
    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace bmpc::testing
