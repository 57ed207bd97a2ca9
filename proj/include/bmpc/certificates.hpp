#pragma once

#include "bmpc/blocking.hpp"
#include "bmpc/formulations.hpp"

#include <string>
#include <vector>

namespace bmpc {

/// P2(Mhat) at a fixed x0 written in the blocked coordinate w:
///   f(w) = F_u(W w + u0; x0),  g(w) = G (W w + u0) - rhs(x0)
/// with W = Hlow^-1 Gamma Mhat, u0 = -Hlow^-1 Bbar'Qbar Abar x0 and G the
/// stacked [G_l; G_u]. f is Hhat-strongly convex with Hhat = W' Hu W.
/// Rows whose U-coefficients vanish are constant in w and are dropped.
class ReducedProgram {
public:
    ReducedProgram(const BilevelInstance& inst, const Matrix& Mhat, const Vector& x0);

    Index dim() const { return W_.cols(); }
    Index rows() const { return G_.rows(); }
    const Matrix& hessian() const { return Hhat_; }
    const Matrix& W() const { return W_; }
    /// Indices into inst.all for each row of g.
    const std::vector<Index>& row_index() const { return rows_; }

    Vector U(const Vector& w) const { return W_ * w + u0_; }
    double f(const Vector& w) const;
    Vector grad_f(const Vector& w) const;
    Vector g(const Vector& w) const { return G_ * U(w) - b_; }
    /// dim x rows; column i is the gradient of g_i.
    const Matrix& grad_g() const { return dG_; }

private:
    const BilevelInstance* inst_;
    Vector x0_;
    Matrix W_;
    Vector u0_;
    Matrix Hhat_;
    Matrix G_;
    Vector b_;
    Matrix dG_;
    std::vector<Index> rows_;
};

enum class CertificateStatus {
    issued,
    gu_violated,  // G_u(U0; x0) <= 0 fails, HMPC bound not applicable
    cq_failed     // constraint-qualification probe failed, bound withheld
};
const char* to_string(CertificateStatus s);

struct GapCertificate {
    std::string label;  // e.g. "V2(M) - V2(Mhat)"
    CertificateStatus status = CertificateStatus::issued;
    double delta = 0.0;
    double epsilon = 0.0;
    std::vector<Index> near_set;  // rows of inst.all in J(w; eps)
    Vector mu;                    // aligned with near_set
    bool mfcq_ok = true;
    Vector w;
    double f_w = 0.0;  // objective at w: the value of the cheaper problem
    std::vector<Index> violating_rows;  // upper rows (inst.upper numbering) when gu_violated
    std::vector<Index> active_set;      // rows of inst.all with |g_i(w)| <= tol_active
};

struct CertificateOptions {
    double tol_active = 1e-6;  // relative: |g_i| <= tol_active (1 + |g|_inf)
    double tol_feas = 1e-8;
    QpTolerances qp;
};

/// Delta_eps(w) = min_{mu >= 0} 1/2 |grad f + grad g_J mu|^2_{Hhat^-1} - g_J(w)'mu
/// with J = {i : g_i(w) >= -max(eps, tol)}. Rows inside the activity
/// tolerance get a zero offset, so eps = 0 gives exactly the plain bound
/// over the active set. The constraint-qualification probe is evaluated
/// on the active rows and recorded; the value itself needs no hypothesis.
GapCertificate delta_bound(const ReducedProgram& prog, const Vector& w, double eps,
                           const CertificateOptions& opt = {});

/// True iff some d satisfies grad_g_I' d <= -1 row-wise (strict descent
/// for every active constraint). `gradients` is k x q, one row per constraint.
bool mfcq_probe(const Matrix& gradients, const QpTolerances& tol = {});

/// Bound on V2(M) - V2(Mhat) at w = T Phi*, T = pinv(Mhat) M.
/// Throws inclusion_violated unless im(M) is in im(Mhat), infeasible if P2(M) is.
GapCertificate blocked_gap_certificate(const BilevelInstance& inst, const BlockingMatrix& M,
                                       const BlockingMatrix& Mhat, const Vector& x0, double eps,
                                       const CertificateOptions& opt = {});

/// Bound on V0 - V2 at w = Theta*(U0(x0); x0) over the unblocked program.
/// Returns status gu_violated (with the rows) instead of a bound when the
/// hierarchical input violates an upper constraint.
GapCertificate hmpc_gap_certificate(const BilevelInstance& inst, const Vector& x0, double eps,
                                    const CertificateOptions& opt = {});

}  // namespace bmpc
