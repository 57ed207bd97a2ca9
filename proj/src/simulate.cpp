#include "bmpc/simulate.hpp"

#include <algorithm>
#include <chrono>
#include <iomanip>
#include <sstream>

namespace bmpc {

const char* to_string(ControllerKind kind) {
    switch (kind) {
        case ControllerKind::hmpc_cascade: return "hmpc_cascade";
        case ControllerKind::reduced_bilevel_cascade: return "reduced_bilevel_cascade";
        case ControllerKind::oracle_bilevel_cascade: return "oracle_bilevel_cascade";
        case ControllerKind::centralized: return "centralized";
    }
    return "unknown";
}

ControllerKind parse_controller_kind(const std::string& name) {
    if (name == "hmpc" || name == "p0" || name == "hmpc_cascade") return ControllerKind::hmpc_cascade;
    if (name == "p2" || name == "reduced_bilevel_cascade") return ControllerKind::reduced_bilevel_cascade;
    if (name == "p1" || name == "oracle_bilevel_cascade") return ControllerKind::oracle_bilevel_cascade;
    if (name == "p3" || name == "centralized") return ControllerKind::centralized;
    throw Error(ErrorCode::config, "unknown controller kind \"" + name + "\"");
}

void ControllerSpec::validate() const {
    const bool blocked_kind = kind == ControllerKind::reduced_bilevel_cascade ||
                              kind == ControllerKind::oracle_bilevel_cascade;
    if (blocking && !blocked_kind) {
        throw Error(ErrorCode::dimension_mismatch,
                    std::string("controller ") + to_string(kind) + " does not take a blocking matrix");
    }
}

namespace {

// Input plan from the controller at state x.
SolveReport plan(const BilevelInstance& inst, const ControllerSpec& ctrl, const Vector& x) {
    switch (ctrl.kind) {
        case ControllerKind::centralized: return solve_p3(inst, x, ctrl.tol);
        case ControllerKind::hmpc_cascade: return solve_hmpc(inst, x, ctrl.tol);
        case ControllerKind::reduced_bilevel_cascade: {
            const SolveReport up = solve_p2(inst, x, ctrl.blocking, P2Method::eliminate, ctrl.tol);
            SolveReport low = solve_lower(inst, up.Theta, x, ctrl.tol);
            low.value = inst.fu.evaluate(low.U, x);
            return low;
        }
        case ControllerKind::oracle_bilevel_cascade: {
            const SolveReport up = solve_p1_oracle(inst, x, ctrl.blocking, ctrl.oracle);
            SolveReport low = solve_lower(inst, up.Theta, x, ctrl.tol);
            low.value = inst.fu.evaluate(low.U, x);
            return low;
        }
    }
    throw Error(ErrorCode::config, "unknown controller kind");
}

}  // namespace

ClosedLoopTrace simulate(const BilevelInstance& inst, const ControllerSpec& ctrl, const Vector& x0,
                         Index steps) {
    ctrl.validate();
    if (x0.size() != inst.n()) throw Error(ErrorCode::dimension_mismatch, "simulate: x0 length");
    if (steps < 0) throw Error(ErrorCode::dimension_mismatch, "simulate: steps must be >= 0");
    const Index m = inst.m();
    const auto& cost = inst.fu.cost();
    ClosedLoopTrace tr;
    tr.states.push_back(x0);
    Vector x = x0;
    for (Index k = 0; k < steps; ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        SolveReport r;
        try {
            r = plan(inst, ctrl, x);
        } catch (const Error& e) {
            tr.failed_step = k;
            tr.failure = std::string(to_string(e.code())) + ": " + e.what();
            break;
        }
        StepRecord rec;
        rec.status = to_string(r.status);
        rec.value = r.value;
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const Vector gu = inst.upper.evaluate(r.U, x);
        rec.upper_violation = gu.size() > 0 ? std::max(0.0, gu.maxCoeff()) : 0.0;
        const Vector u = r.U.head(m);
        tr.inputs.push_back(u);
        tr.stage_costs.push_back(cost.stage(x, u));
        tr.steps.push_back(rec);
        x = inst.plant.step(x, u);
        tr.states.push_back(x);
    }
    return tr;
}

TraceMetrics trace_metrics(const BilevelInstance& inst, const ClosedLoopTrace& trace,
                           double settle_threshold) {
    TraceMetrics out;
    out.steps = trace.length();
    if (trace.states.empty()) throw Error(ErrorCode::dimension_mismatch, "trace_metrics: empty trace");
    double total = 0.0;
    for (double c : trace.stage_costs) total += c;
    out.average_stage_cost = out.steps > 0 ? total / static_cast<double>(out.steps) : 0.0;
    for (Index k = 0; k < out.steps; ++k) {
        const Vector& x = trace.states[static_cast<size_t>(k)];
        const Vector& u = trace.inputs[static_cast<size_t>(k)];
        const Index s = std::min(k, inst.N() - 1);
        for (const auto& c : inst.upper_stage) {
            if (!c.applies(s, inst.N())) continue;
            out.max_upper_violation = std::max(out.max_upper_violation, c.evaluate(x, u).maxCoeff());
        }
    }
    const Vector& xf = trace.states.back();
    Index settle = static_cast<Index>(trace.states.size()) - 1;
    for (Index k = settle; k >= 0; --k) {
        if ((trace.states[static_cast<size_t>(k)] - xf).cwiseAbs().maxCoeff() >= settle_threshold) break;
        settle = k;
    }
    out.settling_step = settle;
    return out;
}

std::string trace_csv(const ClosedLoopTrace& trace) {
    std::ostringstream os;
    os << std::setprecision(17);
    const Index n = trace.states.empty() ? 0 : trace.states.front().size();
    const Index m = trace.inputs.empty() ? 0 : trace.inputs.front().size();
    os << "k";
    for (Index i = 0; i < n; ++i) os << ",x" << i + 1;
    for (Index i = 0; i < m; ++i) os << ",u" << i + 1;
    os << ",stage_cost,value,status\n";
    for (size_t k = 0; k < trace.states.size(); ++k) {
        os << k;
        for (Index i = 0; i < n; ++i) os << ',' << trace.states[k](i);
        if (k < trace.inputs.size()) {
            for (Index i = 0; i < m; ++i) os << ',' << trace.inputs[k](i);
            os << ',' << trace.stage_costs[k] << ',' << trace.steps[k].value << ',' << trace.steps[k].status;
        } else {
            for (Index i = 0; i < m; ++i) os << ',';
            os << ",,," << (trace.completed() ? "final" : "failed");
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace bmpc
