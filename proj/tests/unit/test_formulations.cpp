#include "bmpc/config.hpp"
#include "bmpc/formulations.hpp"

#include "doctest.h"
#include "support/oracles.hpp"

#include <cmath>
#include <limits>

using namespace bmpc;
using bmpc::testing::Rng;

namespace {

// Values from tests/support/toy_reference.py (NumPy rollouts + cvxpy/Clarabel).
constexpr double kV0 = 13.293231213080;
constexpr double kV2 = 12.287828224061;
constexpr double kV3 = 12.287828223693;
constexpr double kV1M1 = 12.534008157867;
constexpr double kV2M[10] = {15.964207611514, 12.967636929545, 12.534008587276, 12.436294168699,
                             12.375094180569, 12.315373920423, 12.303353926549, 12.301058703509,
                             12.290435273106, 12.287828224061};
// Reference accuracy is limited by the interior-point solver (about 1e-8).
constexpr double kRefTol = 1e-6;

bool near(double a, double b, double tol = kRefTol) { return std::abs(a - b) <= tol * (1.0 + std::abs(b)); }

struct Toy {
    ProblemConfig cfg = toy_config();
    BilevelInstance inst = make_instance(cfg);
};

const Toy& toy() {
    static const Toy t;
    return t;
}

// Small random instance: input box in the lower level, one state half-space
// on stages 1..N-1 in the upper level.
struct RandomCase {
    std::optional<BilevelInstance> inst;
    Vector x0;
};

RandomCase random_case(Rng& rng, Index n, Index m, Index N) {
    Matrix A = rng.matrix(n, n);
    const double rho = Eigen::EigenSolver<Matrix>(A).eigenvalues().cwiseAbs().maxCoeff();
    A *= rng.uniform(0.6, 1.1) / std::max(rho, 1e-6);
    const Matrix B = rng.matrix(n, m);
    const Matrix Q = rng.spd(n, 0.2);
    const Matrix R = rng.spd(m, 0.1);
    const auto [Qbar, Rbar] = blkdiag_weights(Q, Q, R, N);

    AffineStageConstraint box;
    box.Cx = Matrix::Zero(2 * m, n);
    box.Cu.resize(2 * m, m);
    box.Cu << Matrix::Identity(m, m), -Matrix::Identity(m, m);
    box.d = Vector::Constant(2 * m, rng.uniform(0.3, 1.0));
    AffineStageConstraint half;
    half.Cx = rng.matrix(1, n);
    half.Cu = Matrix::Zero(1, m);
    half.d = Vector::Constant(1, rng.uniform(0.2, 1.0));
    half.first_stage = 1;

    StageCost cost{rng.vector(n), Vector::Zero(m), rng.spd(n, 0.2), rng.spd(m, 0.1), rng.spd(n, 0.2)};
    RandomCase out;
    out.x0 = rng.vector(n, -0.5, 0.5);
    try {
        out.inst.emplace(LtiPlant(A, B), N, Qbar, Rbar, std::vector{box}, std::vector{half}, cost);
    } catch (const Error&) {
        // singular Gamma or rank-deficient S: skip
    }
    return out;
}

// Lower optimum by exhaustive active-set enumeration.
Vector brute_lower(const BilevelInstance& inst, const Vector& Theta, const Vector& x0) {
    const auto& md = inst.model;
    const Vector c = -(md.Gamma * Theta) + md.x0_gain * x0;
    const auto bf = testing::brute_force_qp(md.Hlow, c, Matrix(0, md.nu()), Vector(0), inst.lower.G,
                                            inst.lower.rhs(x0));
    REQUIRE(bf.feasible);
    return bf.z;
}

// Bilevel optimum by explicit critical-region enumeration of the lower
// problem: on each region the lower solution is affine in Phi, and the
// upper problem restricted to it is a convex QP.
struct RegionResult {
    bool feasible = false;
    double value = std::numeric_limits<double>::infinity();
};

RegionResult region_enumeration(const BilevelInstance& inst, const Matrix& M, const Vector& x0) {
    const Index nu = inst.nu();
    const Index m = inst.m();
    const Index p = M.cols();
    // Every row is +u_k(j) <= ub or -u_k(j) <= ub, so per input coordinate
    // the pattern is one of {free, upper, lower}.
    const Matrix& Gl = inst.lower.G;
    const Vector bl = inst.lower.rhs(x0);
    const Matrix& Gu = inst.upper.G;
    const Vector bu = inst.upper.rhs(x0);
    const Matrix Hinv = inst.model.Hlow.inverse();
    const Matrix GM = inst.model.Gamma * M;
    const Vector g0 = inst.model.x0_gain * x0;
    const Matrix& Hu = inst.fu.hessian();
    const Vector lu = inst.fu.linear(x0);
    const double cu = inst.fu.constant(x0);

    RegionResult best;
    Index patterns = 1;
    for (Index k = 0; k < nu; ++k) patterns *= 3;
    for (Index code = 0; code < patterns; ++code) {
        std::vector<Index> act;
        Index c = code;
        for (Index k = 0; k < nu; ++k) {
            const Index s = c % 3;
            c /= 3;
            if (s == 0) continue;
            // rows of the box for stage k / m, coordinate k % m
            const Index stage = k / m;
            const Index j = k % m;
            act.push_back(stage * 2 * m + (s == 1 ? j : m + j));
        }
        const Index a = static_cast<Index>(act.size());
        Matrix GA(a, nu);
        Vector bA(a);
        for (Index r = 0; r < a; ++r) {
            GA.row(r) = Gl.row(act[static_cast<size_t>(r)]);
            bA(r) = bl(act[static_cast<size_t>(r)]);
        }
        // U = Hinv (GM phi - g0 - GA' lam), lam = S^-1 (GA Hinv (GM phi - g0) - bA)
        Matrix K = Hinv * GM;
        Vector k0 = -Hinv * g0;
        Matrix L = Matrix::Zero(a, p);
        Vector l0 = Vector::Zero(a);
        if (a > 0) {
            const Matrix S = GA * Hinv * GA.transpose();
            const Eigen::LDLT<Matrix> Sf(S);
            L = Sf.solve(GA * K);
            l0 = Sf.solve(GA * k0 - bA);
            K -= Hinv * GA.transpose() * L;
            k0 -= Hinv * GA.transpose() * l0;
        }
        // constraints on phi: -lam <= 0, Gl U <= bl (all rows), Gu U <= bu
        Matrix Ain(a + Gl.rows() + Gu.rows(), p);
        Vector bin(Ain.rows());
        Ain << -L, Gl * K, Gu * K;
        bin << l0, bl - Gl * k0, bu - Gu * k0;
        const Matrix H = K.transpose() * Hu * K + 1e-13 * Matrix::Identity(p, p);
        const Vector q = K.transpose() * (Hu * k0 + lu);
        const QpSolution s = solve_qp(QuadraticProgram(H, q, Matrix(), Vector(), Ain, bin));
        if (s.status != QpStatus::optimal) continue;
        const Vector U = K * s.z + k0;
        const double v = 0.5 * U.dot(Hu * U) + lu.dot(U) + cu;
        if (v < best.value) {
            best.value = v;
            best.feasible = true;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("toy: hierarchical baseline") {
    const auto& t = toy();
    const SteadyStateTarget ss = solve_p0(t.inst);
    CHECK(std::abs(ss.theta(0)) < 1e-9);
    const SolveReport p0 = solve_hmpc(t.inst, t.cfg.x0);
    CHECK(p0.problem == "P0");
    CHECK(near(p0.value, kV0));
    CHECK(p0.Phi.size() == 1);
    CHECK(p0.Theta.cwiseAbs().maxCoeff() < 1e-9);
    CHECK(t.inst.upper.evaluate(p0.U, t.cfg.x0).maxCoeff() == doctest::Approx(-0.144502752339976).epsilon(1e-6));
}

TEST_CASE("toy: P1 = P2 = P3") {
    const auto& t = toy();
    const SolveReport p2 = solve_p2(t.inst, t.cfg.x0);
    const SolveReport p2e = solve_p2(t.inst, t.cfg.x0, std::nullopt, P2Method::explicit_stationarity);
    const SolveReport p3 = solve_p3(t.inst, t.cfg.x0);
    const SolveReport p1 = solve_p1_oracle(t.inst, t.cfg.x0);
    CHECK(near(p2.value, kV2));
    CHECK(near(p3.value, kV3));
    CHECK(std::abs(p2.value - p3.value) <= 1e-9 * (1.0 + p3.value));
    CHECK(std::abs(p2e.value - p2.value) <= 1e-9 * (1.0 + p2.value));
    CHECK(std::abs(p1.value - p2.value) <= 1e-6 * (1.0 + p2.value));
    CHECK((p2.U - p3.U).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((p2e.U - p2.U).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(p2.U(0) == doctest::Approx(1.0).epsilon(1e-7));
    // interior-point inputs are only accurate to about 1e-5
    CHECK(std::abs(p2.U(3) - (-0.414464235824075)) < 1e-4);
    // the reduced plan is realized by the lower problem at its own reference
    const SolveReport low = solve_lower(t.inst, p2.Theta, t.cfg.x0);
    CHECK((low.U - p2.U).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("toy: blocked values follow the reference") {
    const auto& t = toy();
    for (Index i = 1; i <= 10; ++i) {
        CAPTURE(i);
        const SolveReport r = solve_p2(t.inst, t.cfg.x0, leading_free(i, 10, 1));
        CHECK(near(r.value, kV2M[i - 1]));
        CHECK(r.Phi.size() == i);
        CHECK(r.problem == "P2(M,p=" + std::to_string(i) + ")");
    }
    const SolveReport o1 = solve_p1_oracle(t.inst, t.cfg.x0, one_block(10, 1));
    CHECK(near(o1.value, kV1M1));
    CHECK(o1.value <= kV2M[0]);
}

TEST_CASE("toy: horizon one stays consistent") {
    ProblemConfig cfg = toy_config();
    cfg.N = 1;
    const BilevelInstance inst = make_instance(cfg);
    const double v2 = solve_p2(inst, cfg.x0).value;
    CHECK(solve_p3(inst, cfg.x0).value == doctest::Approx(v2).epsilon(1e-9));
    CHECK(solve_p1_oracle(inst, cfg.x0).value == doctest::Approx(v2).epsilon(1e-9));
    CHECK(solve_hmpc(inst, cfg.x0).value >= v2 - 1e-9);
}

TEST_CASE("blocking with zero columns fixes the reference at zero") {
    const auto& t = toy();
    const BlockingMatrix M0(Matrix::Zero(10, 0));
    try {
        solve_p2(t.inst, t.cfg.x0, M0);
        FAIL("expected infeasible: U*(0) leaves the input box at x0");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::infeasible);
    }
    const Vector origin = Vector::Zero(2);
    const SolveReport r = solve_p2(t.inst, origin, M0);
    CHECK(r.Phi.size() == 0);
    CHECK(r.U.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(r.value == doctest::Approx(5.5));  // ten stages and the terminal, each 1/2 |x - [1; 0]|^2
}

TEST_CASE("singular Gamma is rejected") {
    ProblemConfig cfg = toy_config();
    cfg.N = 1;
    cfg.Q = Matrix::Zero(2, 2);
    cfg.Q(1, 1) = 1.0;
    cfg.P = cfg.Q;
    cfg.R = Matrix::Identity(1, 1);
    // Gamma = B' diag(0, 1) [1; 0] + R * 0 = 0
    const auto [Qbar, Rbar] = blkdiag_weights(cfg.Q, cfg.P, cfg.R, 1);
    try {
        BilevelInstance(LtiPlant(cfg.A, cfg.B), 1, Qbar, Rbar, {}, {},
                        StageCost{cfg.x_target, cfg.u_target, cfg.Qu, cfg.Ru, cfg.Pu});
        FAIL("expected singular_gamma");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::singular_gamma);
    }
}

TEST_CASE("infeasible initial state is reported") {
    ProblemConfig cfg = toy_config();
    cfg.upper_constraints[0].first_stage = 0;
    const BilevelInstance inst = make_instance(cfg);
    Vector x0(2);
    x0 << 0.5, 0.0;  // position > 0 violates the stage-0 row, which no input can fix
    for (auto solve : {+[](const BilevelInstance& i, const Vector& x) { return solve_p2(i, x); },
                       +[](const BilevelInstance& i, const Vector& x) { return solve_p3(i, x); },
                       +[](const BilevelInstance& i, const Vector& x) { return solve_p1_oracle(i, x); }}) {
        try {
            solve(inst, x0);
            FAIL("expected infeasible");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::infeasible);
        }
    }
}

TEST_CASE("oracle cap") {
    const auto& t = toy();
    OracleOptions opt;
    opt.cap = 19;
    try {
        solve_p1_oracle(t.inst, t.cfg.x0, std::nullopt, opt);
        FAIL("expected cap_exceeded");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::cap_exceeded);
    }
}

TEST_CASE("lifted evaluation matches stagewise rollouts") {
    Rng rng(21);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const Index n = rng.integer(1, 4);
        const Index m = rng.integer(1, 2);
        const Index N = rng.integer(1, 6);
        RandomCase rc = random_case(rng, n, m, N);
        if (!rc.inst) continue;
        const auto& inst = *rc.inst;
        const Vector U = rng.vector(N * m);
        const Vector X = testing::simulate_stack(inst.plant.A(), inst.plant.B(), rc.x0, U);
        // objective
        const auto& c = inst.fu.cost();
        double v = 0.0;
        Vector x = rc.x0;
        for (Index k = 0; k < N; ++k) {
            const Vector u = U.segment(k * m, m);
            v += 0.5 * (x - c.x_target).dot(c.Q * (x - c.x_target)) + 0.5 * (u - c.u_target).dot(c.R * (u - c.u_target));
            x = X.segment(k * n, n);
        }
        v += 0.5 * (x - c.x_target).dot(c.P * (x - c.x_target));
        CHECK(std::abs(inst.fu.evaluate(U, rc.x0) - v) <= 1e-9 * (1.0 + std::abs(v)));
        CHECK(std::abs(value_of(inst, U, rc.x0) - v) <= 1e-9 * (1.0 + std::abs(v)));
        // constraints, row by row in origin order
        const Vector g = inst.all.evaluate(U, rc.x0);
        for (Index r = 0; r < inst.all.rows(); ++r) {
            const auto& o = inst.all.origin[static_cast<size_t>(r)];
            const bool is_lower = r < inst.lower.rows();
            const auto& con = is_lower ? inst.lower_stage[static_cast<size_t>(o.constraint)]
                                       : inst.upper_stage[static_cast<size_t>(o.constraint)];
            const Vector xk = o.stage == 0 ? rc.x0 : Vector(X.segment((o.stage - 1) * n, n));
            const Vector uk = U.segment(o.stage * m, m);
            const double ref = con.evaluate(xk, uk)(o.row);
            CHECK(std::abs(g(r) - ref) <= 1e-9 * (1.0 + std::abs(ref)));
        }
        const auto seq = state_sequence(inst, U, rc.x0);
        CHECK(seq.size() == static_cast<size_t>(N + 1));
        CHECK((seq.back() - x).cwiseAbs().maxCoeff() < 1e-12);
        ++checked;
    }
    CHECK(checked > 20);
}

TEST_CASE("reference maps are mutually inverse") {
    Rng rng(22);
    for (int trial = 0; trial < 30; ++trial) {
        RandomCase rc = random_case(rng, rng.integer(1, 4), rng.integer(1, 2), rng.integer(1, 6));
        if (!rc.inst) continue;
        const auto& inst = *rc.inst;
        const Vector Theta = rng.vector(inst.nu());
        const Vector U = u_star_map(inst, Theta, rc.x0);
        CHECK((theta_star_map(inst, U, rc.x0) - Theta).cwiseAbs().maxCoeff() <= 1e-9 * (1.0 + Theta.cwiseAbs().maxCoeff()));
        // U*(Theta) zeroes the lower gradient
        CHECK(inst.model.lower_gradient(U, Theta, rc.x0).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("lower problem matches exhaustive enumeration") {
    Rng rng(23);
    for (int trial = 0; trial < 30; ++trial) {
        RandomCase rc = random_case(rng, rng.integer(1, 3), 1, rng.integer(1, 5));
        if (!rc.inst) continue;
        const auto& inst = *rc.inst;
        const Vector Theta = rng.vector(inst.nu(), -3.0, 3.0);
        const SolveReport r = solve_lower(inst, Theta, rc.x0);
        CHECK((r.U - brute_lower(inst, Theta, rc.x0)).cwiseAbs().maxCoeff() < 1e-7);
        CHECK(r.problem == "PL");
    }
}

TEST_CASE("oracle matches critical-region enumeration") {
    Rng rng(24);
    int compared = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const Index N = rng.integer(1, 4);
        RandomCase rc = random_case(rng, 2, 1, N);
        if (!rc.inst) continue;
        const auto& inst = *rc.inst;
        for (const Matrix& M : {one_block(N, 1).matrix(), Matrix(Matrix::Identity(N, N))}) {
            const RegionResult ref = region_enumeration(inst, M, rc.x0);
            CAPTURE(trial);
            try {
                const SolveReport o = solve_p1_oracle(inst, rc.x0, BlockingMatrix(M));
                REQUIRE(ref.feasible);
                CHECK(std::abs(o.value - ref.value) <= 1e-6 * (1.0 + std::abs(ref.value)));
                ++compared;
            } catch (const Error& e) {
                CHECK(e.code() == ErrorCode::infeasible);
                CHECK_FALSE(ref.feasible);
            }
        }
    }
    CHECK(compared > 40);
}

TEST_CASE("value ordering on random instances") {
    Rng rng(25);
    int checked = 0;
    for (int trial = 0; trial < 40; ++trial) {
        const Index N = rng.integer(2, 5);
        RandomCase rc = random_case(rng, rng.integer(1, 3), 1, N);
        if (!rc.inst) continue;
        const auto& inst = *rc.inst;
        double v2 = 0.0;
        try {
            v2 = solve_p2(inst, rc.x0).value;
        } catch (const Error&) {
            continue;
        }
        CHECK(solve_p3(inst, rc.x0).value == doctest::Approx(v2).epsilon(1e-8));
        double prev = std::numeric_limits<double>::infinity();
        for (Index i = 1; i <= N; ++i) {
            const BlockingMatrix M = leading_free(i, N, 1);
            double vi = std::numeric_limits<double>::infinity();
            try {
                vi = solve_p2(inst, rc.x0, M).value;
            } catch (const Error& e) {
                CHECK(e.code() == ErrorCode::infeasible);
            }
            CHECK(vi <= prev + 1e-7);
            CHECK(vi >= v2 - 1e-7);
            try {
                const double v1 = solve_p1_oracle(inst, rc.x0, M).value;
                CHECK(v1 >= v2 - 1e-7);
                CHECK(v1 <= vi + 1e-7);
            } catch (const Error& e) {
                CHECK(e.code() == ErrorCode::infeasible);
            }
            prev = vi;
        }
        ++checked;
    }
    CHECK(checked > 15);
}

TEST_CASE("explicit stationarity agrees with elimination") {
    Rng rng(26);
    for (int trial = 0; trial < 20; ++trial) {
        const Index N = rng.integer(1, 5);
        RandomCase rc = random_case(rng, rng.integer(1, 3), rng.integer(1, 2), N);
        if (!rc.inst) continue;
        const auto& inst = *rc.inst;
        const BlockingMatrix M = leading_free(rng.integer(1, static_cast<int>(N)), N, inst.m());
        try {
            const SolveReport a = solve_p2(inst, rc.x0, M);
            const SolveReport b = solve_p2(inst, rc.x0, M, P2Method::explicit_stationarity);
            CHECK(a.value == doctest::Approx(b.value).epsilon(1e-8));
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::infeasible);
        }
    }
}

TEST_CASE("stage constraint validation") {
    AffineStageConstraint c;
    c.Cx = Matrix::Zero(1, 2);
    c.Cu = Matrix::Zero(1, 1);
    c.d = Vector::Zero(1);
    CHECK_NOTHROW(validate_stage_constraint(c, 2, 1, 5));
    c.Cu = Matrix::Zero(2, 1);
    CHECK_THROWS_AS(validate_stage_constraint(c, 2, 1, 5), Error);
    c.Cu = Matrix::Zero(1, 1);
    c.first_stage = 3;
    c.last_stage = 2;
    CHECK_THROWS_AS(validate_stage_constraint(c, 2, 1, 5), Error);
    c.last_stage = 9;
    CHECK_THROWS_AS(validate_stage_constraint(c, 2, 1, 5), Error);
    CHECK(c.applies(3, 5) == true);
    AffineStageConstraint d = c;
    d.first_stage = 0;
    d.last_stage = -1;
    CHECK(d.applies(4, 5));
    CHECK_FALSE(d.applies(5, 5));
}
