#pragma once

#include "bmpc/blocking.hpp"
#include "bmpc/lti_model.hpp"
#include "bmpc/qp.hpp"

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace bmpc {

/// Cx x_k + Cu u_k <= d for stages k in [first_stage, last_stage].
/// last_stage < 0 means N - 1.
struct AffineStageConstraint {
    Matrix Cx;
    Matrix Cu;
    Vector d;
    Index first_stage = 0;
    Index last_stage = -1;

    Index rows() const { return d.size(); }
    Vector evaluate(const Vector& x, const Vector& u) const { return Cx * x + Cu * u - d; }
    bool applies(Index k, Index N) const {
        const Index last = last_stage < 0 ? N - 1 : last_stage;
        return k >= first_stage && k <= last;
    }
};

void validate_stage_constraint(const AffineStageConstraint& c, Index n, Index m, Index N);

struct ConstraintRow {
    Index constraint = 0;  // index into the stage-constraint list
    Index stage = 0;
    Index row = 0;  // row within that constraint
};

/// G U <= h0 + Hx0 x0, the stage constraints lifted through the prediction.
struct LiftedConstraints {
    Matrix G;
    Vector h0;
    Matrix Hx0;
    std::vector<ConstraintRow> origin;

    Index rows() const { return G.rows(); }
    Vector rhs(const Vector& x0) const { return h0 + Hx0 * x0; }
    /// G U - rhs(x0); feasible iff every entry is <= 0.
    Vector evaluate(const Vector& U, const Vector& x0) const { return G * U - rhs(x0); }
};

LiftedConstraints lift_constraints(const PredictionModel& model,
                                   const std::vector<AffineStageConstraint>& constraints);

/// Row-wise concatenation [a; b].
LiftedConstraints stack_constraints(const LiftedConstraints& a, const LiftedConstraints& b);

/// l(x, u) = 1/2 |x - x_target|^2_Q + 1/2 |u - u_target|^2_R and the
/// terminal cost V_f(x) = 1/2 |x - x_target|^2_P.
struct StageCost {
    Vector x_target;
    Vector u_target;
    Matrix Q;
    Matrix R;
    Matrix P;

    double stage(const Vector& x, const Vector& u) const;
    double terminal(const Vector& x) const;
};

/// F_u(U; x0) = V_f(x_N) + sum_{k=0}^{N-1} l(x_k, u_k) as a quadratic in U:
/// 1/2 U'Hu U + (Lx0 x0 + l0)'U + constant(x0).
class UpperObjective {
public:
    UpperObjective() = default;
    UpperObjective(const PredictionModel& model, StageCost cost);

    const StageCost& cost() const { return cost_; }
    const Matrix& hessian() const { return Hu_; }
    Vector linear(const Vector& x0) const { return Lx0_ * x0 + l0_; }
    double constant(const Vector& x0) const;
    double evaluate(const Vector& U, const Vector& x0) const;
    Vector gradient(const Vector& U, const Vector& x0) const { return Hu_ * U + linear(x0); }

private:
    StageCost cost_;
    Matrix Abar_;
    Matrix Qbar_;  // blkdiag(Q, ..., Q, P) on x_1..x_N
    Matrix Rbar_;
    Vector Xt_;
    Vector Ut_;
    Matrix Hu_;
    Matrix Lx0_;
    Vector l0_;
};

struct InstanceOptions {
    std::optional<double> rank_rtol;
    double gamma_rtol = 1e-10;
};

/// All data of the bilevel problem family for one plant and horizon.
/// Immutable after construction; construction verifies the full-row-rank
/// and Gamma-nonsingularity assumptions and that Hu is positive definite.
struct BilevelInstance {
    BilevelInstance(const LtiPlant& plant, Index N, const Matrix& Qbar, const Matrix& Rbar,
                    std::vector<AffineStageConstraint> lower_stage,
                    std::vector<AffineStageConstraint> upper_stage, StageCost cost,
                    InstanceOptions options = {});

    LtiPlant plant;
    SteadyStateBasis basis;
    PredictionModel model;
    std::vector<AffineStageConstraint> lower_stage;
    std::vector<AffineStageConstraint> upper_stage;
    LiftedConstraints lower;
    LiftedConstraints upper;
    LiftedConstraints all;  // [lower; upper]
    UpperObjective fu;
    double gamma_ratio = 0.0;

    Index N() const { return model.N; }
    Index n() const { return model.n; }
    Index m() const { return model.m; }
    Index nu() const { return model.nu(); }
};

struct SolveReport {
    std::string problem;
    Vector U;
    Vector Theta;
    Vector Phi;  // blocked coordinates, or theta* for the hierarchical baseline
    double value = 0.0;  // F_u(U; x0)
    Vector lower_multipliers;
    QpStatus status = QpStatus::optimal;
    KktResiduals kkt;
    double wall_time_s = 0.0;
    std::vector<Index> lower_pattern;  // oracle: lower rows with positive multiplier
    std::size_t nodes = 0;             // oracle: branch-and-bound nodes solved
};

/// Unique minimizer of the lower tracking QP at reference Theta.
SolveReport solve_lower(const BilevelInstance& inst, const Vector& Theta, const Vector& x0,
                        const QpTolerances& tol = {});

struct SteadyStateTarget {
    Vector theta;
    Vector x;
    Vector u;
    double cost = 0.0;  // l(x, u)
    QpStatus status = QpStatus::optimal;
};

/// Steady-state target: argmin l(Zx theta, Zu theta) s.t. every lower and
/// upper stage constraint holds at the steady state.
SteadyStateTarget solve_p0(const BilevelInstance& inst, const QpTolerances& tol = {});

/// (1_N (x) I_m) theta.
Vector hmpc_reference(const Vector& theta, Index N);

/// Hierarchical baseline at x0: theta* from solve_p0, Theta0 stacked, U0 from
/// the lower problem. value = V0 = F_u(U0; x0), Phi = theta*.
SolveReport solve_hmpc(const BilevelInstance& inst, const Vector& x0, const QpTolerances& tol = {});

/// Gamma^-1 (Hlow U + Bbar'Qbar Abar x0): the reference for which U is the
/// unconstrained lower minimizer.
Vector theta_star_map(const BilevelInstance& inst, const Vector& U, const Vector& x0);

/// Hlow^-1 (Gamma Theta - Bbar'Qbar Abar x0).
Vector u_star_map(const BilevelInstance& inst, const Vector& Theta, const Vector& x0);

enum class P2Method {
    eliminate,             // substitute U = U*(M Phi; x0), QP in Phi only
    explicit_stationarity  // keep (Phi, U) with the stationarity equality
};

/// Complementarity-free reduction, optionally move-blocked.
SolveReport solve_p2(const BilevelInstance& inst, const Vector& x0,
                     const std::optional<BlockingMatrix>& blocking = std::nullopt,
                     P2Method method = P2Method::eliminate, const QpTolerances& tol = {});

/// Centralized problem: min F_u over G_u <= 0, G_l <= 0.
SolveReport solve_p3(const BilevelInstance& inst, const Vector& x0, const QpTolerances& tol = {});

struct OracleOptions {
    Index cap = 22;         // max number of lower rows
    double tie = 1e-9;      // values within tie of the incumbent do not replace it
    QpTolerances tol;
};

/// Exact global optimum of the bilevel problem (optionally blocked) by
/// depth-first branch and bound over lower-constraint complementarity
/// patterns. Leaves are visited with "inactive" before "active" on
/// ascending row index, and an incumbent is only replaced by a strictly
/// better value, so ties resolve to the earliest pattern in that order.
SolveReport solve_p1_oracle(const BilevelInstance& inst, const Vector& x0,
                            const std::optional<BlockingMatrix>& blocking = std::nullopt,
                            const OracleOptions& options = {});

/// F_u(U; x0).
double value_of(const BilevelInstance& inst, const Vector& U, const Vector& x0);

/// Stage-wise state sequence [x_0; x_1; ...; x_N] for U from x0.
std::vector<Vector> state_sequence(const BilevelInstance& inst, const Vector& U, const Vector& x0);

}  // namespace bmpc
