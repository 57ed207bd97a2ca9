#include "bmpc/formulations.hpp"

#include "bmpc/linalg.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

namespace bmpc {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void require_length(const Vector& v, Index n, const char* what) {
    if (v.size() != n) {
        throw Error(ErrorCode::dimension_mismatch, std::string(what) + " must have length " +
                                                       std::to_string(n) + ", got " +
                                                       std::to_string(v.size()));
    }
}

// Rows of a lifted set that actually depend on U, evaluated at x0. Rows
// whose U-coefficients vanish (stage-0 state constraints) are checked
// directly and dropped from the QP.
struct RowBlock {
    Matrix G;
    Vector b;
    std::vector<Index> rows;  // indices into the source LiftedConstraints
};

RowBlock active_rows(const LiftedConstraints& lc, const Vector& x0, double feas, const char* label) {
    const Vector rhs = lc.rhs(x0);
    RowBlock out;
    for (Index i = 0; i < lc.rows(); ++i) {
        if (lc.G.row(i).cwiseAbs().maxCoeff() == 0.0) {
            if (rhs(i) < -feas * (1.0 + std::abs(rhs(i)))) {
                std::ostringstream os;
                os << label << " row " << i << " (stage " << lc.origin[static_cast<size_t>(i)].stage
                   << ") is violated by x0 independently of U";
                throw Error(ErrorCode::infeasible, os.str());
            }
            continue;
        }
        out.rows.push_back(i);
    }
    const Index k = static_cast<Index>(out.rows.size());
    out.G.resize(k, lc.G.cols());
    out.b.resize(k);
    for (Index j = 0; j < k; ++j) {
        out.G.row(j) = lc.G.row(out.rows[static_cast<size_t>(j)]);
        out.b(j) = rhs(out.rows[static_cast<size_t>(j)]);
    }
    return out;
}

Matrix vstack(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() + b.rows(), std::max(a.cols(), b.cols()));
    if (a.rows() > 0) out.topRows(a.rows()) = a;
    if (b.rows() > 0) out.bottomRows(b.rows()) = b;
    return out;
}

Vector vstack(const Vector& a, const Vector& b) {
    Vector out(a.size() + b.size());
    out << a, b;
    return out;
}

void throw_if_not_optimal(const QpSolution& s, const std::string& what) {
    if (s.status == QpStatus::optimal) return;
    std::ostringstream os;
    os << what << ": QP " << to_string(s.status);
    if (s.status == QpStatus::infeasible) {
        os << " (infeasibility measure " << s.infeasibility << ")";
        throw Error(ErrorCode::infeasible, os.str());
    }
    if (s.status == QpStatus::unbounded) throw Error(ErrorCode::unbounded, os.str());
    if (s.status == QpStatus::inaccurate) throw Error(ErrorCode::numerical, os.str());
    throw Error(ErrorCode::max_iterations, os.str());
}

Vector scatter(const Vector& values, const std::vector<Index>& rows, Index size) {
    Vector out = Vector::Zero(size);
    for (size_t j = 0; j < rows.size(); ++j) out(rows[j]) = values(static_cast<Index>(j));
    return out;
}

Matrix blocking_or_identity(const std::optional<BlockingMatrix>& blocking, Index nu) {
    if (!blocking) return Matrix::Identity(nu, nu);
    if (blocking->rows() != nu) {
        throw Error(ErrorCode::dimension_mismatch,
                    "blocking matrix has " + std::to_string(blocking->rows()) + " rows, expected " +
                        std::to_string(nu));
    }
    return blocking->matrix();
}

std::string blocked_label(const char* base, const std::optional<BlockingMatrix>& blocking) {
    if (!blocking) return base;
    return std::string(base) + "(M,p=" + std::to_string(blocking->p()) + ")";
}

}  // namespace

void validate_stage_constraint(const AffineStageConstraint& c, Index n, Index m, Index N) {
    const Index r = c.d.size();
    if (r < 1) throw Error(ErrorCode::dimension_mismatch, "stage constraint needs at least one row");
    if (c.Cx.rows() != r || c.Cx.cols() != n) {
        throw Error(ErrorCode::dimension_mismatch,
                    "Cx must be " + std::to_string(r) + "x" + std::to_string(n) + ", got " +
                        std::to_string(c.Cx.rows()) + "x" + std::to_string(c.Cx.cols()));
    }
    if (c.Cu.rows() != r || c.Cu.cols() != m) {
        throw Error(ErrorCode::dimension_mismatch,
                    "Cu must be " + std::to_string(r) + "x" + std::to_string(m) + ", got " +
                        std::to_string(c.Cu.rows()) + "x" + std::to_string(c.Cu.cols()));
    }
    const Index last = c.last_stage < 0 ? N - 1 : c.last_stage;
    if (c.first_stage < 0 || last >= N || c.first_stage > last) {
        throw Error(ErrorCode::dimension_mismatch,
                    "stage range [" + std::to_string(c.first_stage) + ", " + std::to_string(last) +
                        "] outside [0, " + std::to_string(N - 1) + "]");
    }
}

LiftedConstraints lift_constraints(const PredictionModel& model,
                                   const std::vector<AffineStageConstraint>& constraints) {
    const Index N = model.N;
    const Index n = model.n;
    const Index m = model.m;
    Index total = 0;
    for (const auto& c : constraints) {
        validate_stage_constraint(c, n, m, N);
        for (Index k = 0; k < N; ++k)
            if (c.applies(k, N)) total += c.rows();
    }
    LiftedConstraints out;
    out.G = Matrix::Zero(total, model.nu());
    out.h0 = Vector::Zero(total);
    out.Hx0 = Matrix::Zero(total, n);
    out.origin.reserve(static_cast<size_t>(total));
    Index row = 0;
    for (size_t ci = 0; ci < constraints.size(); ++ci) {
        const auto& c = constraints[ci];
        const Index r = c.rows();
        for (Index k = 0; k < N; ++k) {
            if (!c.applies(k, N)) continue;
            // x_k = A^k x0 + sum_{j<k} A^(k-1-j) B u_j, i.e. block k-1 of the stacks.
            auto G = out.G.middleRows(row, r);
            G.middleCols(k * m, m) += c.Cu;
            if (k == 0) {
                out.Hx0.middleRows(row, r) = -c.Cx;
            } else {
                G += c.Cx * model.Bbar.middleRows((k - 1) * n, n);
                out.Hx0.middleRows(row, r) = -c.Cx * model.Abar.middleRows((k - 1) * n, n);
            }
            out.h0.segment(row, r) = c.d;
            for (Index i = 0; i < r; ++i)
                out.origin.push_back({static_cast<Index>(ci), k, i});
            row += r;
        }
    }
    return out;
}

LiftedConstraints stack_constraints(const LiftedConstraints& a, const LiftedConstraints& b) {
    LiftedConstraints out;
    out.G = vstack(a.G, b.G);
    out.h0 = vstack(a.h0, b.h0);
    out.Hx0 = vstack(a.Hx0, b.Hx0);
    out.origin = a.origin;
    out.origin.insert(out.origin.end(), b.origin.begin(), b.origin.end());
    return out;
}

double StageCost::stage(const Vector& x, const Vector& u) const {
    const Vector dx = x - x_target;
    const Vector du = u - u_target;
    return 0.5 * dx.dot(Q * dx) + 0.5 * du.dot(R * du);
}

double StageCost::terminal(const Vector& x) const {
    const Vector dx = x - x_target;
    return 0.5 * dx.dot(P * dx);
}

UpperObjective::UpperObjective(const PredictionModel& model, StageCost cost)
    : cost_(std::move(cost)) {
    const Index N = model.N;
    const Index n = model.n;
    const Index m = model.m;
    require_length(cost_.x_target, n, "x_target");
    require_length(cost_.u_target, m, "u_target");
    if (cost_.Q.rows() != n || cost_.Q.cols() != n || cost_.P.rows() != n || cost_.P.cols() != n ||
        cost_.R.rows() != m || cost_.R.cols() != m) {
        throw Error(ErrorCode::dimension_mismatch, "upper weights must be Q,P: nxn and R: mxm");
    }
    std::tie(Qbar_, Rbar_) = blkdiag_weights(cost_.Q, cost_.P, cost_.R, N);
    Abar_ = model.Abar;
    Xt_ = cost_.x_target.replicate(N, 1);
    Ut_ = cost_.u_target.replicate(N, 1);
    const Matrix BtQ = model.Bbar.transpose() * Qbar_;
    Hu_ = linalg::symmetrize(BtQ * model.Bbar + Rbar_);
    Lx0_ = BtQ * Abar_;
    l0_ = -BtQ * Xt_ - Rbar_ * Ut_;
    Eigen::LLT<Matrix> llt(Hu_);
    if (llt.info() != Eigen::Success) {
        throw Error(ErrorCode::not_positive_definite, "upper Hessian Hu is not positive definite");
    }
}

double UpperObjective::constant(const Vector& x0) const {
    const Vector dx = Abar_ * x0 - Xt_;
    const Vector d0 = x0 - cost_.x_target;
    return 0.5 * d0.dot(cost_.Q * d0) + 0.5 * dx.dot(Qbar_ * dx) + 0.5 * Ut_.dot(Rbar_ * Ut_);
}

double UpperObjective::evaluate(const Vector& U, const Vector& x0) const {
    return 0.5 * U.dot(Hu_ * U) + linear(x0).dot(U) + constant(x0);
}

BilevelInstance::BilevelInstance(const LtiPlant& plant_, Index N, const Matrix& Qbar,
                                 const Matrix& Rbar, std::vector<AffineStageConstraint> lower_stage_,
                                 std::vector<AffineStageConstraint> upper_stage_, StageCost cost,
                                 InstanceOptions options)
    : plant(plant_),
      basis(steady_state_basis(plant_, options.rank_rtol)),
      model(prediction_model(plant_, basis, N, Qbar, Rbar)),
      lower_stage(std::move(lower_stage_)),
      upper_stage(std::move(upper_stage_)),
      lower(lift_constraints(model, lower_stage)),
      upper(lift_constraints(model, upper_stage)),
      all(stack_constraints(lower, upper)),
      fu(model, std::move(cost)) {
    const GammaCheck gc = check_gamma_nonsingular(model, options.gamma_rtol);
    gamma_ratio = gc.ratio;
    if (!gc.nonsingular) {
        std::ostringstream os;
        os << "Gamma is singular: sigma_min/sigma_max = " << gc.ratio << " <= " << options.gamma_rtol;
        throw Error(ErrorCode::singular_gamma, os.str());
    }
}

SolveReport solve_lower(const BilevelInstance& inst, const Vector& Theta, const Vector& x0,
                        const QpTolerances& tol) {
    const auto t0 = Clock::now();
    const auto& md = inst.model;
    require_length(Theta, md.nu(), "Theta");
    require_length(x0, md.n, "x0");
    const RowBlock rb = active_rows(inst.lower, x0, tol.feas, "lower constraint");
    const Vector c = -md.Gamma * Theta + md.x0_gain * x0;
    const QpSolution s = solve_qp(QuadraticProgram(md.Hlow, c, Matrix(), Vector(), rb.G, rb.b), tol);
    throw_if_not_optimal(s, "lower problem");
    SolveReport r;
    r.problem = "PL";
    r.U = s.z;
    r.Theta = Theta;
    r.value = inst.fu.evaluate(r.U, x0);
    r.lower_multipliers = scatter(s.mu_ineq, rb.rows, inst.lower.rows());
    r.status = s.status;
    r.kkt = s.kkt;
    r.wall_time_s = seconds_since(t0);
    return r;
}

SteadyStateTarget solve_p0(const BilevelInstance& inst, const QpTolerances& tol) {
    const auto& cost = inst.fu.cost();
    const Matrix Zx = inst.basis.Zx();
    const Matrix Zu = inst.basis.Zu();
    const Matrix H = Zx.transpose() * cost.Q * Zx + Zu.transpose() * cost.R * Zu;
    const Vector c = -(Zx.transpose() * cost.Q * cost.x_target + Zu.transpose() * cost.R * cost.u_target);
    Index rows = 0;
    for (const auto& sc : inst.lower_stage) rows += sc.rows();
    for (const auto& sc : inst.upper_stage) rows += sc.rows();
    Matrix A(rows, inst.m());
    Vector b(rows);
    Index at = 0;
    for (const auto* list : {&inst.lower_stage, &inst.upper_stage}) {
        for (const auto& sc : *list) {
            A.middleRows(at, sc.rows()) = sc.Cx * Zx + sc.Cu * Zu;
            b.segment(at, sc.rows()) = sc.d;
            at += sc.rows();
        }
    }
    const QpSolution s = solve_qp(QuadraticProgram(H, c, Matrix(), Vector(), A, b), tol);
    throw_if_not_optimal(s, "steady-state target");
    SteadyStateTarget out;
    out.theta = s.z;
    out.x = Zx * s.z;
    out.u = Zu * s.z;
    out.cost = cost.stage(out.x, out.u);
    out.status = s.status;
    return out;
}

Vector hmpc_reference(const Vector& theta, Index N) { return theta.replicate(N, 1); }

SolveReport solve_hmpc(const BilevelInstance& inst, const Vector& x0, const QpTolerances& tol) {
    const auto t0 = Clock::now();
    const SteadyStateTarget ss = solve_p0(inst, tol);
    SolveReport r = solve_lower(inst, hmpc_reference(ss.theta, inst.N()), x0, tol);
    r.problem = "P0";
    r.Phi = ss.theta;
    r.wall_time_s = seconds_since(t0);
    return r;
}

Vector theta_star_map(const BilevelInstance& inst, const Vector& U, const Vector& x0) {
    const auto& md = inst.model;
    require_length(U, md.nu(), "U");
    require_length(x0, md.n, "x0");
    return md.gamma_lu.solve(md.Hlow * U + md.x0_gain * x0);
}

Vector u_star_map(const BilevelInstance& inst, const Vector& Theta, const Vector& x0) {
    const auto& md = inst.model;
    require_length(Theta, md.nu(), "Theta");
    require_length(x0, md.n, "x0");
    return md.hlow_llt.solve(md.Gamma * Theta - md.x0_gain * x0);
}

SolveReport solve_p2(const BilevelInstance& inst, const Vector& x0,
                     const std::optional<BlockingMatrix>& blocking, P2Method method,
                     const QpTolerances& tol) {
    const auto t0 = Clock::now();
    const auto& md = inst.model;
    require_length(x0, md.n, "x0");
    const Index nu = md.nu();
    const Matrix M = blocking_or_identity(blocking, nu);
    const Index p = M.cols();
    const RowBlock lo = active_rows(inst.lower, x0, tol.feas, "lower constraint");
    const RowBlock up = active_rows(inst.upper, x0, tol.feas, "upper constraint");
    const Matrix G = vstack(lo.G, up.G);
    const Vector b = vstack(lo.b, up.b);
    const Matrix& Hu = inst.fu.hessian();
    const Vector lin = inst.fu.linear(x0);

    SolveReport r;
    r.problem = blocked_label("P2", blocking);
    QpSolution s;
    if (p == 0) {
        // Theta = 0 is the only reference; U is its unconstrained lower response.
        r.Phi = Vector(0);
        r.U = -md.hlow_llt.solve(md.x0_gain * x0);
        const Vector viol = G * r.U - b;
        s.status = QpStatus::optimal;
        s.mu_ineq = Vector::Zero(G.rows());
        s.kkt.primal_feasibility = viol.size() > 0 ? std::max(0.0, viol.maxCoeff()) : 0.0;
        if (s.kkt.primal_feasibility > tol.feas * (1.0 + (b.size() > 0 ? b.cwiseAbs().maxCoeff() : 0.0))) {
            throw Error(ErrorCode::infeasible, r.problem + ": the zero reference violates a constraint");
        }
    } else if (method == P2Method::eliminate) {
        const Matrix W = md.hlow_llt.solve(md.Gamma * M);
        const Vector u0 = -md.hlow_llt.solve(md.x0_gain * x0);
        const Matrix H = W.transpose() * Hu * W;
        const Vector c = W.transpose() * (Hu * u0 + lin);
        s = solve_qp(QuadraticProgram(H, c, Matrix(), Vector(), G * W, b - G * u0), tol);
        throw_if_not_optimal(s, r.problem);
        r.Phi = s.z;
        r.U = W * r.Phi + u0;
    } else {
        // z = (Phi, U): Hlow U - Gamma M Phi = -x0_gain x0.
        Matrix H = Matrix::Zero(p + nu, p + nu);
        H.bottomRightCorner(nu, nu) = Hu;
        Vector c = Vector::Zero(p + nu);
        c.tail(nu) = lin;
        Matrix Aeq(nu, p + nu);
        Aeq << -md.Gamma * M, md.Hlow;
        const Vector beq = -md.x0_gain * x0;
        Matrix Ain(G.rows(), p + nu);
        Ain << Matrix::Zero(G.rows(), p), G;
        s = solve_qp(QuadraticProgram(H, c, Aeq, beq, Ain, b), tol);
        throw_if_not_optimal(s, r.problem);
        r.Phi = s.z.head(p);
        r.U = s.z.tail(nu);
    }
    r.Theta = M * r.Phi;
    r.value = inst.fu.evaluate(r.U, x0);
    r.lower_multipliers =
        scatter(s.mu_ineq.head(static_cast<Index>(lo.rows.size())), lo.rows, inst.lower.rows());
    r.status = s.status;
    r.kkt = s.kkt;
    r.wall_time_s = seconds_since(t0);
    return r;
}

SolveReport solve_p3(const BilevelInstance& inst, const Vector& x0, const QpTolerances& tol) {
    const auto t0 = Clock::now();
    require_length(x0, inst.n(), "x0");
    const RowBlock lo = active_rows(inst.lower, x0, tol.feas, "lower constraint");
    const RowBlock up = active_rows(inst.upper, x0, tol.feas, "upper constraint");
    const QpSolution s = solve_qp(QuadraticProgram(inst.fu.hessian(), inst.fu.linear(x0), Matrix(),
                                                   Vector(), vstack(lo.G, up.G), vstack(lo.b, up.b)),
                                  tol);
    throw_if_not_optimal(s, "P3");
    SolveReport r;
    r.problem = "P3";
    r.U = s.z;
    r.Theta = theta_star_map(inst, r.U, x0);
    r.value = inst.fu.evaluate(r.U, x0);
    r.lower_multipliers =
        scatter(s.mu_ineq.head(static_cast<Index>(lo.rows.size())), lo.rows, inst.lower.rows());
    r.status = s.status;
    r.kkt = s.kkt;
    r.wall_time_s = seconds_since(t0);
    return r;
}

namespace {

// Branch and bound for P1 over complementarity patterns of the lower rows.
// A node fixes some rows "inactive" (multiplier zero) and some "active"
// (row tight); the remaining rows keep a multiplier without
// complementarity, which relaxes every pattern below the node.
//
// Rows with antiparallel gradients (both sides of a box) share one signed
// multiplier: lambda * g_pos stands for mu_pos * g_pos + mu_neg * g_neg.
// Keeping both nonnegative multipliers would leave a zero-cost ray
// (mu_pos, mu_neg) -> +inf in every relaxation.
class OracleSearch {
public:
    OracleSearch(const BilevelInstance& inst, const Vector& x0, const Matrix& M,
                 const OracleOptions& opt)
        : inst_(inst), x0_(x0), M_(M), opt_(opt) {
        lo_ = active_rows(inst.lower, x0, opt.tol.feas, "lower constraint");
        up_ = active_rows(inst.upper, x0, opt.tol.feas, "upper constraint");
        const Index k = static_cast<Index>(lo_.rows.size());
        if (k > opt.cap) {
            throw Error(ErrorCode::cap_exceeded,
                        "P1 oracle: " + std::to_string(k) + " lower rows exceed the cap of " +
                            std::to_string(opt.cap) + "; shrink N or raise --oracle-cap");
        }
        build_groups();
        state_.assign(groups_.size(), Undecided);
    }

    void run() { visit(); }

    bool found() const { return best_value_ < std::numeric_limits<double>::infinity(); }
    const Vector& phi() const { return best_phi_; }
    const Vector& U() const { return best_U_; }
    const Vector& mu() const { return best_mu_; }
    const KktResiduals& kkt() const { return best_kkt_; }
    std::size_t nodes() const { return nodes_; }
    const RowBlock& lower_rows() const { return lo_; }

private:
    enum State { Undecided, Inactive, PosActive, NegActive };

    struct Group {
        Index pos = -1;
        Index neg = -1;      // -1 for a single row
        double ratio = 1.0;  // g_neg = -ratio * g_pos
    };

    struct Relaxation {
        bool feasible = false;
        double value = 0.0;
        Vector phi;
        Vector U;
        Vector lambda;  // per group, zero for inactive groups
        Vector slack;   // per lower row
        KktResiduals kkt;
    };

    void build_groups() {
        const Index k = static_cast<Index>(lo_.rows.size());
        std::vector<bool> used(static_cast<size_t>(k), false);
        for (Index i = 0; i < k; ++i) {
            if (used[static_cast<size_t>(i)]) continue;
            Group g;
            g.pos = i;
            const double ni = lo_.G.row(i).norm();
            for (Index j = i + 1; j < k; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                const double nj = lo_.G.row(j).norm();
                if ((lo_.G.row(i) / ni + lo_.G.row(j) / nj).cwiseAbs().maxCoeff() <= 1e-12) {
                    g.neg = j;
                    g.ratio = nj / ni;
                    used[static_cast<size_t>(j)] = true;
                    break;
                }
            }
            used[static_cast<size_t>(i)] = true;
            groups_.push_back(g);
        }
    }

    Relaxation relax() {
        ++nodes_;
        const auto& md = inst_.model;
        const Index nu = md.nu();
        const Index p = M_.cols();
        const Index k = static_cast<Index>(lo_.rows.size());
        std::vector<size_t> S;  // groups carrying a multiplier
        std::vector<Index> tight;
        for (size_t g = 0; g < groups_.size(); ++g) {
            if (state_[g] != Inactive) S.push_back(g);
            if (state_[g] == PosActive) tight.push_back(groups_[g].pos);
            if (state_[g] == NegActive) tight.push_back(groups_[g].neg);
        }
        const Index s = static_cast<Index>(S.size());
        const Index t = static_cast<Index>(tight.size());
        const Index q = p + nu + s;

        Matrix H = Matrix::Zero(q, q);
        H.block(p, p, nu, nu) = inst_.fu.hessian();
        Vector c = Vector::Zero(q);
        c.segment(p, nu) = inst_.fu.linear(x0_);

        Matrix Aeq = Matrix::Zero(nu + t, q);
        Vector beq = Vector::Zero(nu + t);
        Aeq.block(0, 0, nu, p) = -md.Gamma * M_;
        Aeq.block(0, p, nu, nu) = md.Hlow;
        for (Index j = 0; j < s; ++j)
            Aeq.block(0, p + nu + j, nu, 1) = lo_.G.row(groups_[S[static_cast<size_t>(j)]].pos).transpose();
        beq.head(nu) = -md.x0_gain * x0_;
        for (Index j = 0; j < t; ++j) {
            Aeq.block(nu + j, p, 1, nu) = lo_.G.row(tight[static_cast<size_t>(j)]);
            beq(nu + j) = lo_.b(tight[static_cast<size_t>(j)]);
        }

        // Sign rows: lambda >= 0 for singles and PosActive, lambda <= 0 for NegActive.
        std::vector<std::pair<Index, double>> signs;
        for (Index j = 0; j < s; ++j) {
            const size_t g = S[static_cast<size_t>(j)];
            if (state_[g] == NegActive) {
                signs.emplace_back(j, 1.0);
            } else if (groups_[g].neg < 0 || state_[g] == PosActive) {
                signs.emplace_back(j, -1.0);
            }
        }
        const Index nup = up_.G.rows();
        const Index nsg = static_cast<Index>(signs.size());
        Matrix Ain = Matrix::Zero(k + nup + nsg, q);
        Vector bin = Vector::Zero(k + nup + nsg);
        Ain.block(0, p, k, nu) = lo_.G;
        bin.head(k) = lo_.b;
        if (nup > 0) {
            Ain.block(k, p, nup, nu) = up_.G;
            bin.segment(k, nup) = up_.b;
        }
        for (Index r = 0; r < nsg; ++r)
            Ain(k + nup + r, p + nu + signs[static_cast<size_t>(r)].first) = signs[static_cast<size_t>(r)].second;

        const QpSolution sol = solver_.solve(QuadraticProgram(H, c, Aeq, beq, Ain, bin));
        Relaxation r;
        if (sol.status == QpStatus::infeasible) return r;
        throw_if_not_optimal(sol, "P1 oracle node");
        r.feasible = true;
        r.value = sol.value + inst_.fu.constant(x0_);
        r.phi = sol.z.head(p);
        r.U = sol.z.segment(p, nu);
        r.lambda = Vector::Zero(static_cast<Index>(groups_.size()));
        for (Index j = 0; j < s; ++j) r.lambda(static_cast<Index>(S[static_cast<size_t>(j)])) = sol.z(p + nu + j);
        r.slack = lo_.b - lo_.G * r.U;
        r.kkt = sol.kkt;
        return r;
    }

    // First undecided group whose multiplier sits on a slack row.
    Index violated_group(const Relaxation& r) const {
        const double scale = opt_.tol.active * (1.0 + lo_.b.cwiseAbs().maxCoeff());
        const double mu_tol = opt_.tol.kkt * (1.0 + r.lambda.cwiseAbs().maxCoeff());
        for (size_t g = 0; g < groups_.size(); ++g) {
            if (state_[g] != Undecided) continue;
            const double l = r.lambda(static_cast<Index>(g));
            if (l > mu_tol && r.slack(groups_[g].pos) > scale) return static_cast<Index>(g);
            if (groups_[g].neg >= 0 && l < -mu_tol && r.slack(groups_[g].neg) > scale)
                return static_cast<Index>(g);
        }
        return -1;
    }

    Vector row_multipliers(const Vector& lambda) const {
        Vector mu = Vector::Zero(static_cast<Index>(lo_.rows.size()));
        for (size_t g = 0; g < groups_.size(); ++g) {
            const double l = lambda(static_cast<Index>(g));
            if (l >= 0.0) {
                mu(groups_[g].pos) = l;
            } else {
                mu(groups_[g].neg) = -l / groups_[g].ratio;
            }
        }
        return mu;
    }

    void visit() {
        const Relaxation r = relax();
        if (!r.feasible) return;
        if (r.value >= best_value_ - opt_.tie) return;
        const Index gi = violated_group(r);
        if (gi < 0) {
            best_value_ = r.value;
            best_phi_ = r.phi;
            best_U_ = r.U;
            best_mu_ = row_multipliers(r.lambda);
            best_kkt_ = r.kkt;
            return;
        }
        const size_t g = static_cast<size_t>(gi);
        state_[g] = Inactive;
        visit();
        state_[g] = PosActive;
        visit();
        if (groups_[g].neg >= 0) {
            state_[g] = NegActive;
            visit();
        }
        state_[g] = Undecided;
    }

    const BilevelInstance& inst_;
    Vector x0_;
    Matrix M_;
    OracleOptions opt_;
    QpSolver solver_{opt_.tol};
    RowBlock lo_;
    RowBlock up_;
    std::vector<Group> groups_;
    std::vector<State> state_;
    std::size_t nodes_ = 0;
    double best_value_ = std::numeric_limits<double>::infinity();
    Vector best_phi_;
    Vector best_U_;
    Vector best_mu_;
    KktResiduals best_kkt_;
};

}  // namespace

SolveReport solve_p1_oracle(const BilevelInstance& inst, const Vector& x0,
                            const std::optional<BlockingMatrix>& blocking,
                            const OracleOptions& options) {
    const auto t0 = Clock::now();
    require_length(x0, inst.n(), "x0");
    const Matrix M = blocking_or_identity(blocking, inst.nu());
    OracleSearch search(inst, x0, M, options);
    search.run();
    const std::string label = blocked_label("P1", blocking);
    if (!search.found()) {
        throw Error(ErrorCode::infeasible, label + " oracle: every complementarity pattern is infeasible");
    }
    SolveReport r;
    r.problem = label;
    r.Phi = search.phi();
    r.Theta = M * r.Phi;
    r.U = search.U();
    r.value = inst.fu.evaluate(r.U, x0);
    const auto& rows = search.lower_rows().rows;
    r.lower_multipliers = scatter(search.mu(), rows, inst.lower.rows());
    const double mu_scale = 1.0 + search.mu().cwiseAbs().maxCoeff();
    for (size_t j = 0; j < rows.size(); ++j) {
        if (search.mu()(static_cast<Index>(j)) > options.tol.kkt * mu_scale) r.lower_pattern.push_back(rows[j]);
    }
    // The winning pattern must reproduce the lower-level response.
    const SolveReport low = solve_lower(inst, r.Theta, x0, options.tol);
    const double mismatch = (low.U - r.U).cwiseAbs().maxCoeff();
    if (mismatch > 1e-6 * (1.0 + r.U.cwiseAbs().maxCoeff())) {
        std::ostringstream os;
        os << label << " oracle: lower response differs from the selected pattern by " << mismatch;
        throw Error(ErrorCode::numerical, os.str());
    }
    r.status = QpStatus::optimal;
    r.kkt = search.kkt();
    r.nodes = search.nodes();
    r.wall_time_s = seconds_since(t0);
    return r;
}

double value_of(const BilevelInstance& inst, const Vector& U, const Vector& x0) {
    require_length(U, inst.nu(), "U");
    require_length(x0, inst.n(), "x0");
    return inst.fu.evaluate(U, x0);
}

std::vector<Vector> state_sequence(const BilevelInstance& inst, const Vector& U, const Vector& x0) {
    require_length(U, inst.nu(), "U");
    require_length(x0, inst.n(), "x0");
    const Vector X = inst.model.predict(U, x0);
    std::vector<Vector> xs;
    xs.reserve(static_cast<size_t>(inst.N() + 1));
    xs.push_back(x0);
    for (Index k = 0; k < inst.N(); ++k) xs.push_back(X.segment(k * inst.n(), inst.n()));
    return xs;
}

}  // namespace bmpc
