#pragma once

#include "bmpc/config.hpp"
#include "bmpc/simulate.hpp"

#include <optional>
#include <string>
#include <vector>

namespace bmpc {

/// Process exit codes shared by every command.
namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int error = 1;  // numerical failure or a --verify mismatch
inline constexpr int hypothesis = 2;
inline constexpr int infeasible = 3;
inline constexpr int config = 4;
}  // namespace exit_code

int exit_code_for(ErrorCode code);

struct CommandOptions {
    std::string out_dir = ".";
    bool verify = false;
    double verify_tol = 1e-9;  // relative: |a - b| <= tol (1 + |a|)
    std::vector<double> eps = {0.0, 0.1, 0.5, 1.0};
    std::vector<Index> i_list;  // empty: 1..N
    Index steps = 40;
    Index oracle_cap = 22;
    std::vector<std::string> controllers = {"hmpc", "p2", "p3"};
    std::optional<Index> blocking;  // M_i for the blocked cascades
    bool quiet = false;
};

struct CommandResult {
    int exit_code = exit_code::ok;
    std::vector<std::string> files;     // written outputs
    std::vector<std::string> failures;  // failed checks, with diffs
    std::vector<std::string> log;       // one-line progress/summary messages
};

/// Solves P0, P2, P1 (oracle) and P3 at cfg.x0 and writes toy_report.json
/// with U, Theta, predicted X and value per formulation. Checks
/// V1 = V2 = V3 and coinciding P2/P3 trajectories.
CommandResult cmd_toy_example(const ProblemConfig& cfg, const CommandOptions& opt);

/// ordering.csv: one row per formulation P2(M_i), P2, P0 and P2(M*), with
/// V2, oracle V1, the bound Delta and Delta_eps per eps. Also writes
/// ordering_summary.json with the ordering checks and rank(M*).
CommandResult cmd_ordering(const ProblemConfig& cfg, const CommandOptions& opt);

/// trace_<kind>.csv per controller plus simulate_summary.json.
CommandResult cmd_simulate(const ProblemConfig& cfg, const CommandOptions& opt);

/// Blocking spec: "full", "hmpc" (only as `m_spec`) or an integer i for M_i.
/// Writes certificate.json with one certificate per eps.
CommandResult cmd_certify(const ProblemConfig& cfg, const std::string& m_spec,
                          const std::string& mhat_spec, const CommandOptions& opt);

/// F_u(U; x0) by rolling the plant forward and summing stage costs.
double rollout_value(const BilevelInstance& inst, const Vector& U, const Vector& x0);

/// Parses "full" or a 1-based index i <= N into a blocking matrix.
BlockingMatrix parse_blocking(const std::string& spec, Index N, Index m);

}  // namespace bmpc
