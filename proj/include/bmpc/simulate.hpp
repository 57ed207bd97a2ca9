#pragma once

#include "bmpc/formulations.hpp"

#include <optional>
#include <string>
#include <vector>

namespace bmpc {

enum class ControllerKind {
    hmpc_cascade,             // P0 -> lower tracking QP
    reduced_bilevel_cascade,  // P2 (optionally blocked) -> lower tracking QP
    oracle_bilevel_cascade,   // P1 oracle (optionally blocked) -> lower tracking QP
    centralized               // P3
};

const char* to_string(ControllerKind kind);
/// Accepts "hmpc", "p2", "p1", "p3" and the enum names.
ControllerKind parse_controller_kind(const std::string& name);

struct ControllerSpec {
    ControllerKind kind = ControllerKind::centralized;
    std::optional<BlockingMatrix> blocking;  // only for the bilevel cascades
    QpTolerances tol;
    OracleOptions oracle;

    /// Throws dimension_mismatch when a blocking matrix is attached to a
    /// kind that does not use one.
    void validate() const;
};

struct StepRecord {
    std::string status = "optimal";
    double value = 0.0;  // upper objective of the plan computed at this step
    double wall_time_s = 0.0;
    double upper_violation = 0.0;  // max(G_u(U_k; x_k))_+ of the plan
};

/// States x_0..x_K, inputs u_0..u_{K-1}. A trace that hit an infeasible
/// step stops there: `failed_step` is that step and `failure` the reason.
struct ClosedLoopTrace {
    std::vector<Vector> states;
    std::vector<Vector> inputs;
    std::vector<double> stage_costs;  // l(x_k, u_k) under the upper stage cost
    std::vector<StepRecord> steps;
    Index failed_step = -1;
    std::string failure;

    bool completed() const { return failed_step < 0; }
    Index length() const { return static_cast<Index>(inputs.size()); }
};

/// Receding-horizon loop: every step re-solves the controller's problems at
/// the current state from scratch, applies the first input block and
/// advances x+ = A x + B u.
ClosedLoopTrace simulate(const BilevelInstance& inst, const ControllerSpec& ctrl, const Vector& x0,
                         Index steps);

struct TraceMetrics {
    double average_stage_cost = 0.0;
    double max_upper_violation = 0.0;  // over upper stage constraints at (x_k, u_k)
    Index settling_step = 0;           // first k with |x_j - x_K|_inf < threshold for all j >= k
    Index steps = 0;
};

TraceMetrics trace_metrics(const BilevelInstance& inst, const ClosedLoopTrace& trace,
                           double settle_threshold = 1e-3);

/// Header: k, x1..xn, u1..um, stage_cost, value, status. The last row holds
/// x_K only.
std::string trace_csv(const ClosedLoopTrace& trace);

}  // namespace bmpc
