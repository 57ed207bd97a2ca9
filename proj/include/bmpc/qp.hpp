#pragma once

#include "bmpc/types.hpp"

#include <vector>

namespace bmpc {

/// min 1/2 z'Hz + c'z  s.t.  Aeq z = beq,  Aineq z <= bineq.
///
/// H must be symmetric positive semidefinite; it is symmetrized on
/// construction. Empty constraint blocks may be passed as default matrices.
struct QuadraticProgram {
    Matrix H;
    Vector c;
    Matrix Aeq;
    Vector beq;
    Matrix Aineq;
    Vector bineq;

    QuadraticProgram() = default;
    QuadraticProgram(Matrix H, Vector c, Matrix Aeq = {}, Vector beq = {}, Matrix Aineq = {},
                     Vector bineq = {});

    Index num_vars() const { return H.rows(); }
    Index num_eq() const { return Aeq.rows(); }
    Index num_ineq() const { return Aineq.rows(); }

    double objective(const Vector& z) const { return 0.5 * z.dot(H * z) + c.dot(z); }
};

/// `inaccurate`: the active-set iteration terminated but the final KKT
/// residuals exceed 1e3 times the configured tolerances.
enum class QpStatus { optimal, infeasible, unbounded, max_iter, inaccurate };

const char* to_string(QpStatus status);

struct KktResiduals {
    double stationarity = 0.0;        // |Hz + c + Aeq'nu + Aineq'mu|_inf
    double primal_feasibility = 0.0;  // max(|Aeq z - beq|_inf, max(Aineq z - bineq)_+)
    double dual_feasibility = 0.0;    // max(-mu)_+
    double complementarity = 0.0;     // |mu'(Aineq z - bineq)|
};

struct QpSolution {
    Vector z;
    Vector mu_ineq;
    Vector nu_eq;
    double value = 0.0;
    std::vector<Index> active_set;  // inequalities tight at z
    QpStatus status = QpStatus::infeasible;
    KktResiduals kkt;
    /// Phase-1 optimum max_i (Aineq z - bineq)_i (or equality residual);
    /// zero when a feasible point was found.
    double infeasibility = 0.0;
    int iterations = 0;
};

struct QpTolerances {
    double kkt = 1e-8;
    double feas = 1e-8;
    double active = 1e-7;  // relative: |g_i| <= active * (1 + |b|_inf)
    int max_iter = 0;      // 0 selects a size-dependent cap
};

/// Primal active-set solver. One instance holds workspace for a single
/// solve at a time; distinct instances are independent.
class QpSolver {
public:
    explicit QpSolver(QpTolerances tol = {}) : tol_(tol) {}

    QpSolution solve(const QuadraticProgram& qp);

    const QpTolerances& tolerances() const { return tol_; }

private:
    QpTolerances tol_;
    std::vector<Index> working_;
};

QpSolution solve_qp(const QuadraticProgram& qp, const QpTolerances& tol = {});

struct NnlsResult {
    Vector mu;
    double value = 0.0;
    QpStatus status = QpStatus::optimal;
};

/// argmin_{mu >= 0} 1/2 |target + G mu|^2_{metric^-1} + offsets'mu.
///
/// G is q x k, metric q x q positive definite, offsets of length k.
/// Solved as a k-dimensional QP over the nonnegative orthant.
NnlsResult solve_nnls(const Matrix& G, const Vector& target, const Matrix& metric,
                      const Vector& offsets, const QpTolerances& tol = {});

}  // namespace bmpc
