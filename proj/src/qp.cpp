#include "bmpc/qp.hpp"

#include "bmpc/linalg.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace bmpc {

const char* to_string(QpStatus status) {
    switch (status) {
        case QpStatus::optimal: return "optimal";
        case QpStatus::infeasible: return "infeasible";
        case QpStatus::unbounded: return "unbounded";
        case QpStatus::max_iter: return "max_iter";
        case QpStatus::inaccurate: return "inaccurate";
    }
    return "unknown";
}

QuadraticProgram::QuadraticProgram(Matrix H_, Vector c_, Matrix Aeq_, Vector beq_, Matrix Aineq_,
                                   Vector bineq_)
    : H(std::move(H_)), c(std::move(c_)), Aeq(std::move(Aeq_)), beq(std::move(beq_)),
      Aineq(std::move(Aineq_)), bineq(std::move(bineq_)) {
    const Index q = H.rows();
    if (H.cols() != q) {
        throw Error(ErrorCode::dimension_mismatch, "QP Hessian must be square");
    }
    if (c.size() != q) {
        throw Error(ErrorCode::dimension_mismatch, "QP linear term has wrong length");
    }
    if (Aeq.size() == 0) Aeq.resize(0, q);
    if (Aineq.size() == 0) Aineq.resize(0, q);
    if (beq.size() == 0) beq.resize(Aeq.rows());
    if (bineq.size() == 0) bineq.resize(Aineq.rows());
    if (Aeq.cols() != q || beq.size() != Aeq.rows()) {
        throw Error(ErrorCode::dimension_mismatch, "QP equality block has inconsistent dimensions");
    }
    if (Aineq.cols() != q || bineq.size() != Aineq.rows()) {
        throw Error(ErrorCode::dimension_mismatch,
                    "QP inequality block has inconsistent dimensions");
    }
    H = linalg::symmetrize(H);
}

namespace {

enum class CoreExit { optimal, unbounded, max_iter, stopped };

// Problem in the form the active-set core expects: E has independent rows
// and the starting point is feasible.
struct CoreProblem {
    const Matrix& H;
    const Vector& c;
    const Matrix& E;
    const Matrix& A;
    const Vector& b;
};

struct CoreState {
    Vector z;
    std::vector<Index> working;  // sorted inequality indices
    Vector nu;                   // multipliers of E rows
    Vector mu_w;                 // multipliers of working rows (same order)
    int iterations = 0;
};

Matrix stack_working(const CoreProblem& p, const std::vector<Index>& working) {
    const Index q = p.H.rows();
    Matrix aw(p.E.rows() + static_cast<Index>(working.size()), q);
    aw.topRows(p.E.rows()) = p.E;
    for (size_t k = 0; k < working.size(); ++k) {
        aw.row(p.E.rows() + static_cast<Index>(k)) = p.A.row(working[k]);
    }
    return aw;
}

CoreExit run_core(const CoreProblem& p, CoreState& s, const QpTolerances& tol, int max_iter,
                  const std::function<bool(const Vector&)>& stop) {
    const Index q = p.H.rows();
    const Index ni = p.A.rows();
    const double h_scale = q > 0 ? p.H.cwiseAbs().maxCoeff() : 0.0;
    std::vector<char> in_working(static_cast<size_t>(ni), 0);
    for (Index i : s.working) in_working[static_cast<size_t>(i)] = 1;

    bool stationary = false;
    bool last_degenerate = false;

    for (; s.iterations < max_iter; ++s.iterations) {
        if (stop && stop(s.z)) {
            return CoreExit::stopped;
        }
        const Vector g = p.H * s.z + p.c;
        const Matrix aw = stack_working(p, s.working);
        const Index r = aw.rows();

        Eigen::ColPivHouseholderQR<Matrix> qr;
        Matrix nullbasis;
        if (r == 0) {
            nullbasis = Matrix::Identity(q, q);
        } else {
            qr.compute(aw.transpose());
            const Matrix Q = qr.householderQ();
            nullbasis = Q.rightCols(q - r);
        }

        Vector step = Vector::Zero(q);
        bool ray = false;
        if (!stationary && nullbasis.cols() > 0) {
            const Matrix hr = linalg::symmetrize(nullbasis.transpose() * p.H * nullbasis);
            const Vector gr = nullbasis.transpose() * g;
            Eigen::SelfAdjointEigenSolver<Matrix> es(hr);
            const Vector& lam = es.eigenvalues();
            const Matrix& vec = es.eigenvectors();
            // Curvature below roundoff of the full Hessian counts as flat; scaling by
            // the reduced spectrum alone would promote a lone roundoff eigenvalue.
            const double lam_max = std::max(lam.cwiseAbs().maxCoeff(), h_scale);
            const double cut = 1e3 * std::numeric_limits<double>::epsilon() * lam_max;
            Vector newton = Vector::Zero(hr.rows());
            Vector flat = Vector::Zero(hr.rows());
            for (Index k = 0; k < lam.size(); ++k) {
                const double proj = vec.col(k).dot(gr);
                if (lam(k) > cut && lam(k) > 0.0) {
                    newton -= vec.col(k) * (proj / lam(k));
                } else {
                    flat += vec.col(k) * proj;
                }
            }
            if (flat.norm() > 1e-9 * (1.0 + gr.norm())) {
                ray = true;
                step = -nullbasis * flat;
            } else {
                step = nullbasis * newton;
            }
        }

        const double step_scale = 1e-12 * (1.0 + s.z.cwiseAbs().maxCoeff());
        if (!ray && step.cwiseAbs().maxCoeff() <= step_scale) {
            // Stationary on the current working set: inspect multipliers.
            Vector lambda = Vector::Zero(r);
            if (r > 0) {
                lambda = qr.solve(Vector(-g));
            }
            s.nu = lambda.head(p.E.rows());
            s.mu_w = lambda.tail(static_cast<Index>(s.working.size()));
            Index drop = -1;
            double most_negative = -tol.kkt;
            for (size_t k = 0; k < s.working.size(); ++k) {
                const double mu = s.mu_w(static_cast<Index>(k));
                if (mu < -tol.kkt) {
                    if (last_degenerate) {
                        drop = static_cast<Index>(k);  // lowest constraint index
                        break;
                    }
                    if (mu < most_negative) {
                        most_negative = mu;
                        drop = static_cast<Index>(k);
                    }
                }
            }
            if (drop < 0) {
                return CoreExit::optimal;
            }
            in_working[static_cast<size_t>(s.working[static_cast<size_t>(drop)])] = 0;
            s.working.erase(s.working.begin() + drop);
            stationary = false;
            continue;
        }

        // Ratio test along `step`.
        double alpha = ray ? std::numeric_limits<double>::infinity() : 1.0;
        Index blocking = -1;
        const double step_norm = step.norm();
        for (Index i = 0; i < ni; ++i) {
            if (in_working[static_cast<size_t>(i)]) continue;
            const double ad = p.A.row(i).dot(step);
            if (ad <= 1e-12 * p.A.row(i).norm() * step_norm) continue;
            const double slack = std::max(0.0, p.b(i) - p.A.row(i).dot(s.z));
            const double t = slack / ad;
            if (t < alpha) {
                alpha = t;
                blocking = i;
            }
        }
        if (blocking < 0 && ray) {
            return CoreExit::unbounded;
        }
        s.z += alpha * step;
        if (blocking >= 0) {
            last_degenerate = alpha <= 0.0;
            in_working[static_cast<size_t>(blocking)] = 1;
            s.working.insert(std::lower_bound(s.working.begin(), s.working.end(), blocking),
                             blocking);
            stationary = false;
        } else {
            last_degenerate = false;
            stationary = true;
        }
    }
    return CoreExit::max_iter;
}

KktResiduals kkt_residuals(const QuadraticProgram& qp, const Vector& z, const Vector& nu,
                           const Vector& mu) {
    KktResiduals k;
    Vector stat = qp.H * z + qp.c;
    if (qp.num_eq() > 0) stat += qp.Aeq.transpose() * nu;
    if (qp.num_ineq() > 0) stat += qp.Aineq.transpose() * mu;
    k.stationarity = stat.size() > 0 ? stat.cwiseAbs().maxCoeff() : 0.0;
    double feas = 0.0;
    if (qp.num_eq() > 0) feas = (qp.Aeq * z - qp.beq).cwiseAbs().maxCoeff();
    if (qp.num_ineq() > 0) {
        const Vector slack = qp.Aineq * z - qp.bineq;
        feas = std::max(feas, std::max(0.0, slack.maxCoeff()));
        k.complementarity = std::abs(mu.dot(slack));
        k.dual_feasibility = std::max(0.0, -mu.minCoeff());
    }
    k.primal_feasibility = feas;
    return k;
}

}  // namespace

QpSolution QpSolver::solve(const QuadraticProgram& qp) {
    const Index q = qp.num_vars();
    const Index ne = qp.num_eq();
    const Index ni = qp.num_ineq();
    const int max_iter = tol_.max_iter > 0 ? tol_.max_iter
                                           : static_cast<int>(50 * (q + ni + ne) + 200);

    QpSolution sol;
    sol.z = Vector::Zero(q);
    sol.mu_ineq = Vector::Zero(ni);
    sol.nu_eq = Vector::Zero(ne);

    // Equalities: minimum-norm point and an independent row subset.
    Vector z0 = Vector::Zero(q);
    std::vector<Index> eq_rows;
    if (ne > 0) {
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(qp.Aeq);
        z0 = cod.solve(qp.beq);
        const double resid = (qp.Aeq * z0 - qp.beq).cwiseAbs().maxCoeff();
        if (resid > tol_.feas * (1.0 + qp.beq.cwiseAbs().maxCoeff())) {
            sol.status = QpStatus::infeasible;
            sol.infeasibility = resid;
            sol.z = z0;
            return sol;
        }
        Eigen::ColPivHouseholderQR<Matrix> rows_qr(qp.Aeq.transpose());
        rows_qr.setThreshold(1e-12);
        const Index rank = rows_qr.rank();
        for (Index k = 0; k < rank; ++k) {
            eq_rows.push_back(rows_qr.colsPermutation().indices()(k));
        }
        std::sort(eq_rows.begin(), eq_rows.end());
    }
    Matrix E(static_cast<Index>(eq_rows.size()), q);
    for (size_t k = 0; k < eq_rows.size(); ++k) E.row(static_cast<Index>(k)) = qp.Aeq.row(eq_rows[k]);

    int iterations = 0;
    Vector z = z0;
    if (ni > 0) {
        const double violation = (qp.Aineq * z0 - qp.bineq).maxCoeff();
        if (violation > 0.0) {
            // Phase 1: min t (+ rho/2 |z - z0|^2) s.t. E z = E z0, Aineq z - t <= bineq,
            // t >= 0. The proximal pass keeps the feasible point near z0 when the
            // feasible set has flat directions; the pure LP pass decides
            // infeasibility if the proximal pass stalls above the target.
            const double target = 0.1 * tol_.feas;
            CoreState s1;
            auto phase1 = [&](double rho, const Vector& start) {
                Matrix H1 = Matrix::Zero(q + 1, q + 1);
                H1.topLeftCorner(q, q).diagonal().setConstant(rho);
                Vector c1 = Vector::Zero(q + 1);
                c1.head(q) = -rho * z0;
                c1(q) = 1.0;
                Matrix E1 = Matrix::Zero(E.rows(), q + 1);
                E1.leftCols(q) = E;
                Matrix A1 = Matrix::Zero(ni + 1, q + 1);
                A1.topLeftCorner(ni, q) = qp.Aineq;
                A1.col(q).head(ni).setConstant(-1.0);
                A1(ni, q) = -1.0;
                Vector b1 = Vector::Zero(ni + 1);
                b1.head(ni) = qp.bineq;
                CoreProblem p1{H1, c1, E1, A1, b1};
                s1 = CoreState{};
                s1.z.resize(q + 1);
                s1.z << start, std::max(0.0, (qp.Aineq * start - qp.bineq).maxCoeff());
                const auto ex = run_core(p1, s1, tol_, max_iter, [&](const Vector& y) {
                    return y(q) <= target;
                });
                iterations += s1.iterations;
                return ex;
            };
            const double rho = 1e-6 / (1.0 + z0.squaredNorm());
            auto exit = phase1(rho, z0);
            if (s1.z(q) > target) exit = phase1(0.0, Vector(s1.z.head(q)));
            z = s1.z.head(q);
            const double t = std::max(0.0, (qp.Aineq * z - qp.bineq).maxCoeff());
            if (exit == CoreExit::max_iter && t > tol_.feas) {
                sol.status = QpStatus::max_iter;
                sol.z = z;
                sol.infeasibility = t;
                sol.iterations = iterations;
                return sol;
            }
            if (t > tol_.feas) {
                sol.status = QpStatus::infeasible;
                sol.infeasibility = t;
                sol.z = z;
                sol.iterations = iterations;
                return sol;
            }
        }
    }

    CoreProblem p2{qp.H, qp.c, E, qp.Aineq, qp.bineq};
    CoreState s;
    s.z = z;
    s.working = std::move(working_);
    s.working.clear();
    const auto exit = run_core(p2, s, tol_, max_iter, nullptr);
    iterations += s.iterations;
    working_ = s.working;

    sol.z = s.z;
    sol.iterations = iterations;
    sol.value = qp.objective(s.z);
    if (exit == CoreExit::unbounded) {
        sol.status = QpStatus::unbounded;
        sol.value = -std::numeric_limits<double>::infinity();
        return sol;
    }
    if (exit == CoreExit::max_iter) {
        sol.status = QpStatus::max_iter;
    } else {
        sol.status = QpStatus::optimal;
        for (size_t k = 0; k < eq_rows.size(); ++k) sol.nu_eq(eq_rows[k]) = s.nu(static_cast<Index>(k));
        for (size_t k = 0; k < s.working.size(); ++k) {
            sol.mu_ineq(s.working[k]) = std::max(0.0, s.mu_w(static_cast<Index>(k)));
        }
    }
    if (ni > 0) {
        const double cut = tol_.active * (1.0 + qp.bineq.cwiseAbs().maxCoeff());
        const Vector slack = qp.Aineq * sol.z - qp.bineq;
        for (Index i = 0; i < ni; ++i) {
            if (std::abs(slack(i)) <= cut) sol.active_set.push_back(i);
        }
    }
    sol.kkt = kkt_residuals(qp, sol.z, sol.nu_eq, sol.mu_ineq);
    if (sol.status == QpStatus::optimal) {
        double scale = 1.0 + (q > 0 ? qp.c.cwiseAbs().maxCoeff() : 0.0);
        if (ni > 0) scale = std::max(scale, 1.0 + qp.bineq.cwiseAbs().maxCoeff());
        if (ne > 0) scale = std::max(scale, 1.0 + qp.beq.cwiseAbs().maxCoeff());
        if (sol.kkt.primal_feasibility > 1e3 * tol_.feas * scale ||
            sol.kkt.stationarity > 1e3 * tol_.kkt * scale) {
            sol.status = QpStatus::inaccurate;
        }
    }
    return sol;
}

QpSolution solve_qp(const QuadraticProgram& qp, const QpTolerances& tol) {
    QpSolver solver(tol);
    return solver.solve(qp);
}

NnlsResult solve_nnls(const Matrix& G, const Vector& target, const Matrix& metric,
                      const Vector& offsets, const QpTolerances& tol) {
    const Index q = target.size();
    const Index k = G.cols();
    if (G.rows() != q || metric.rows() != q || metric.cols() != q || offsets.size() != k) {
        throw Error(ErrorCode::dimension_mismatch, "solve_nnls: inconsistent dimensions");
    }
    Eigen::LLT<Matrix> llt(linalg::symmetrize(metric));
    if (llt.info() != Eigen::Success) {
        throw Error(ErrorCode::not_positive_definite, "solve_nnls: metric is not positive definite");
    }
    // Whitened quantities: |v|^2_{metric^-1} = |L^-1 v|^2.
    const Matrix Gw = llt.matrixL().solve(G);
    const Vector tw = llt.matrixL().solve(target);

    NnlsResult out;
    out.mu = Vector::Zero(k);
    if (k > 0) {
        QuadraticProgram qp(Gw.transpose() * Gw, Gw.transpose() * tw + offsets, Matrix(), Vector(),
                            -Matrix::Identity(k, k), Vector::Zero(k));
        const QpSolution sol = solve_qp(qp, tol);
        out.status = sol.status;
        if (sol.status == QpStatus::unbounded) {
            out.value = -std::numeric_limits<double>::infinity();
            return out;
        }
        out.mu = sol.z.cwiseMax(0.0);
    }
    out.value = 0.5 * (tw + Gw * out.mu).squaredNorm() + offsets.dot(out.mu);
    return out;
}

}  // namespace bmpc
