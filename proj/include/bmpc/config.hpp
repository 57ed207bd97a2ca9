#pragma once

#include "bmpc/formulations.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bmpc {

struct ToleranceConfig {
    std::optional<double> rank_rtol;  // steady-state basis; default max(n+m)*eps
    double gamma_rtol = 1e-10;
    double blocking_rtol = 1e-8;  // constructed-blocking singular-value cut, relative
    double qp_kkt = 1e-8;
    double qp_feas = 1e-8;
    double qp_active = 1e-7;
    double cert_active = 1e-6;
    double settle = 1e-3;  // state inf-norm threshold for the settling step
};

struct SamplingConfig {
    int samples = 50;
    Vector half_width;  // per state; empty means 0.2 in every coordinate
    std::uint64_t seed = 1;
};

/// Everything needed to build a BilevelInstance plus the experiment
/// settings shared by the CLI commands.
struct ProblemConfig {
    Matrix A;
    Matrix B;
    Index N = 1;
    // Lower tracking weights: either (Q, P, R) stage weights or full stacks.
    Matrix Q;
    Matrix P;
    Matrix R;
    std::optional<Matrix> Qbar;
    std::optional<Matrix> Rbar;
    std::vector<AffineStageConstraint> lower_constraints;
    // Upper objective and constraints.
    Vector x_target;
    Vector u_target;
    Matrix Qu;
    Matrix Ru;
    Matrix Pu;
    std::vector<AffineStageConstraint> upper_constraints;
    Vector x0;
    ToleranceConfig tol;
    SamplingConfig sampling;
};

/// Parse and validate. Throws Error(config) with a path-qualified message
/// such as "plant.A: row 1 has 3 entries, expected 2".
ProblemConfig parse_config(const std::string& json_text);
ProblemConfig load_config(const std::string& path);

/// Canonical JSON: matrices as {"rows","cols","data"} row-major, 17
/// significant digits.
std::string dump_config(const ProblemConfig& cfg);
void save_config(const ProblemConfig& cfg, const std::string& path);

/// The double-integrator example: Ts = 0.3, N = 10, Q = P = I, R = 0.1,
/// |u| <= 1, position <= 0, target [1; 0], x0 = [-1; 0].
ProblemConfig toy_config();

/// Builds the instance; module-level failures are rethrown as
/// Error(config) prefixed with the offending section.
BilevelInstance make_instance(const ProblemConfig& cfg);

QpTolerances qp_tolerances(const ProblemConfig& cfg);

/// BMPC_SEED if set and parseable, otherwise cfg.sampling.seed.
std::uint64_t sampling_seed(const ProblemConfig& cfg);

/// Uniform samples x0 + [-w, w] drawn with std::mt19937_64(seed).
std::vector<Vector> sample_box(const Vector& center, const Vector& half_width, int count,
                               std::uint64_t seed);

}  // namespace bmpc
