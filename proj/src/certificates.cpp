#include "bmpc/certificates.hpp"

#include "bmpc/linalg.hpp"

#include <algorithm>
#include <sstream>

namespace bmpc {

const char* to_string(CertificateStatus s) {
    switch (s) {
        case CertificateStatus::issued: return "issued";
        case CertificateStatus::gu_violated: return "gu_violated";
        case CertificateStatus::cq_failed: return "cq_failed";
    }
    return "unknown";
}

ReducedProgram::ReducedProgram(const BilevelInstance& inst, const Matrix& Mhat, const Vector& x0)
    : inst_(&inst), x0_(x0) {
    const auto& md = inst.model;
    if (Mhat.rows() != md.nu()) {
        throw Error(ErrorCode::dimension_mismatch, "ReducedProgram: Mhat must have N*m rows");
    }
    if (x0.size() != md.n) throw Error(ErrorCode::dimension_mismatch, "ReducedProgram: x0 length");
    W_ = md.hlow_llt.solve(md.Gamma * Mhat);
    u0_ = -md.hlow_llt.solve(md.x0_gain * x0);
    Hhat_ = linalg::symmetrize(W_.transpose() * inst.fu.hessian() * W_);
    const auto& all = inst.all;
    const Vector rhs = all.rhs(x0);
    for (Index i = 0; i < all.rows(); ++i) {
        if (all.G.row(i).cwiseAbs().maxCoeff() > 0.0) rows_.push_back(i);
    }
    const Index k = static_cast<Index>(rows_.size());
    G_.resize(k, md.nu());
    b_.resize(k);
    for (Index j = 0; j < k; ++j) {
        G_.row(j) = all.G.row(rows_[static_cast<size_t>(j)]);
        b_(j) = rhs(rows_[static_cast<size_t>(j)]);
    }
    dG_ = W_.transpose() * G_.transpose();
}

double ReducedProgram::f(const Vector& w) const { return inst_->fu.evaluate(U(w), x0_); }

Vector ReducedProgram::grad_f(const Vector& w) const {
    return W_.transpose() * inst_->fu.gradient(U(w), x0_);
}

bool mfcq_probe(const Matrix& gradients, const QpTolerances& tol) {
    const Index k = gradients.rows();
    if (k == 0) return true;
    const Index q = gradients.cols();
    const QuadraticProgram qp(Matrix::Identity(q, q), Vector::Zero(q), Matrix(), Vector(), gradients,
                              -Vector::Ones(k));
    return solve_qp(qp, tol).status == QpStatus::optimal;
}

GapCertificate delta_bound(const ReducedProgram& prog, const Vector& w, double eps,
                           const CertificateOptions& opt) {
    if (eps < 0.0) throw Error(ErrorCode::dimension_mismatch, "delta_bound: eps must be >= 0");
    if (w.size() != prog.dim()) throw Error(ErrorCode::dimension_mismatch, "delta_bound: w length");
    const Vector g = prog.g(w);
    const double gmax = g.size() > 0 ? g.cwiseAbs().maxCoeff() : 0.0;
    if (g.size() > 0 && g.maxCoeff() > opt.tol_feas * (1.0 + gmax)) {
        std::ostringstream os;
        os << "delta_bound: w is infeasible (max g = " << g.maxCoeff() << ")";
        throw Error(ErrorCode::infeasible, os.str());
    }
    const double act = opt.tol_active * (1.0 + gmax);
    const double reach = std::max(eps, act);

    GapCertificate c;
    c.epsilon = eps;
    c.w = w;
    c.f_w = prog.f(w);
    std::vector<Index> local;
    std::vector<Index> active_local;
    for (Index i = 0; i < g.size(); ++i) {
        if (g(i) >= -reach) local.push_back(i);
        if (std::abs(g(i)) <= act) active_local.push_back(i);
    }
    const Index k = static_cast<Index>(local.size());
    Matrix GJ(prog.dim(), k);
    Vector offsets(k);
    for (Index j = 0; j < k; ++j) {
        const Index i = local[static_cast<size_t>(j)];
        GJ.col(j) = prog.grad_g().col(i);
        offsets(j) = std::abs(g(i)) <= act ? 0.0 : -g(i);
        c.near_set.push_back(prog.row_index()[static_cast<size_t>(i)]);
    }
    Matrix GI(static_cast<Index>(active_local.size()), prog.dim());
    for (size_t j = 0; j < active_local.size(); ++j) {
        GI.row(static_cast<Index>(j)) = prog.grad_g().col(active_local[j]).transpose();
        c.active_set.push_back(prog.row_index()[active_local[j]]);
    }
    c.mfcq_ok = mfcq_probe(GI, opt.qp);
    if (!c.mfcq_ok) c.status = CertificateStatus::cq_failed;

    const NnlsResult r = solve_nnls(GJ, prog.grad_f(w), prog.hessian(), offsets, opt.qp);
    if (r.status != QpStatus::optimal) {
        throw Error(ErrorCode::numerical, std::string("delta_bound: NNLS ") + to_string(r.status));
    }
    c.mu = r.mu;
    c.delta = std::max(r.value, 0.0);
    return c;
}

GapCertificate blocked_gap_certificate(const BilevelInstance& inst, const BlockingMatrix& M,
                                       const BlockingMatrix& Mhat, const Vector& x0, double eps,
                                       const CertificateOptions& opt) {
    if (!image_contains(M, Mhat)) {
        throw Error(ErrorCode::inclusion_violated, "blocked_gap_certificate: im(M) is not in im(Mhat)");
    }
    const SolveReport p2 = solve_p2(inst, x0, M, P2Method::eliminate, opt.qp);
    const Matrix T = restriction_map(M, Mhat);
    const ReducedProgram prog(inst, Mhat.matrix(), x0);
    GapCertificate c = delta_bound(prog, T * p2.Phi, eps, opt);
    c.label = "V2(M) - V2(Mhat)";
    return c;
}

GapCertificate hmpc_gap_certificate(const BilevelInstance& inst, const Vector& x0, double eps,
                                    const CertificateOptions& opt) {
    const SolveReport p0 = solve_hmpc(inst, x0, opt.qp);
    const Vector gu = inst.upper.evaluate(p0.U, x0);
    GapCertificate c;
    c.label = "V0 - V2";
    c.epsilon = eps;
    for (Index i = 0; i < gu.size(); ++i) {
        if (gu(i) > opt.tol_feas * (1.0 + std::abs(inst.upper.rhs(x0)(i)))) c.violating_rows.push_back(i);
    }
    const Vector w = theta_star_map(inst, p0.U, x0);
    if (!c.violating_rows.empty()) {
        c.status = CertificateStatus::gu_violated;
        c.w = w;
        c.f_w = p0.value;
        c.mfcq_ok = false;
        return c;
    }
    const ReducedProgram prog(inst, Matrix::Identity(inst.nu(), inst.nu()), x0);
    GapCertificate out = delta_bound(prog, w, eps, opt);
    out.label = c.label;
    return out;
}

}  // namespace bmpc
