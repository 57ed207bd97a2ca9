// bmpc: command-line front end for the bilevel MPC experiments.

#include "bmpc/commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <optional>

using namespace bmpc;

namespace {

struct TolOverrides {
    std::optional<double> rank, gamma, blocking, kkt, feas, active, cert, settle;

    void add(CLI::App& app) {
        app.add_option("--tol-rank", rank, "steady-state basis rank tolerance (relative)");
        app.add_option("--tol-gamma", gamma, "Gamma nonsingularity tolerance (relative)");
        app.add_option("--tol-blocking", blocking, "singular-value cut for the constructed blocking (relative)");
        app.add_option("--tol-kkt", kkt, "QP stationarity tolerance");
        app.add_option("--tol-feas", feas, "QP feasibility tolerance");
        app.add_option("--tol-active", active, "QP activity tolerance");
        app.add_option("--tol-cert", cert, "certificate activity tolerance");
        app.add_option("--tol-settle", settle, "settling threshold in state inf-norm");
    }

    void apply(ProblemConfig& cfg) const {
        if (rank) cfg.tol.rank_rtol = *rank;
        if (gamma) cfg.tol.gamma_rtol = *gamma;
        if (blocking) cfg.tol.blocking_rtol = *blocking;
        if (kkt) cfg.tol.qp_kkt = *kkt;
        if (feas) cfg.tol.qp_feas = *feas;
        if (active) cfg.tol.qp_active = *active;
        if (cert) cfg.tol.cert_active = *cert;
        if (settle) cfg.tol.settle = *settle;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bilevel MPC experiments: formulations, move blocking, gap certificates"};
    app.require_subcommand(1);

    std::string config_path;
    CommandOptions opt;
    TolOverrides tol;
    std::optional<Index> horizon;
    std::string m_spec = "3";
    std::string mhat_spec = "full";

    app.add_option("--config", config_path, "problem config JSON (default: built-in toy example)");
    app.add_option("--out", opt.out_dir, "output directory");
    app.add_flag("--verify", opt.verify, "re-derive every reported value and fail on mismatch > 1e-9");
    app.add_flag("-q,--quiet", opt.quiet, "suppress progress output");
    app.add_option("--oracle-cap", opt.oracle_cap, "maximum lower rows for the P1 oracle")->check(CLI::PositiveNumber);
    app.add_option("--horizon", horizon, "override the horizon N")->check(CLI::PositiveNumber);
    tol.add(app);

    auto* toy = app.add_subcommand("toy", "solve P0, P1, P2, P3 at x0 and check their consistency");
    auto* ordering = app.add_subcommand("ordering", "blocked values, oracle values and bounds per M_i");
    ordering->add_option("--i-list", opt.i_list, "blocking indices i (default 1..N)")->delimiter(',');
    ordering->add_option("--eps", opt.eps, "epsilon list")->delimiter(',');
    auto* sim = app.add_subcommand("simulate", "closed-loop traces per controller");
    sim->add_option("--steps", opt.steps, "closed-loop steps")->check(CLI::NonNegativeNumber);
    sim->add_option("--controllers", opt.controllers, "hmpc, p2, p1, p3")->delimiter(',');
    sim->add_option("--blocking", opt.blocking, "use M_i in the bilevel cascades");
    auto* cert = app.add_subcommand("certify", "a posteriori gap certificate");
    cert->add_option("--M", m_spec, "\"hmpc\", \"full\" or an index i");
    cert->add_option("--Mhat", mhat_spec, "\"full\" or an index i");
    cert->add_option("--eps", opt.eps, "epsilon list")->delimiter(',');
    auto* dump = app.add_subcommand("dump-config", "write the effective config as canonical JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        ProblemConfig cfg = config_path.empty() ? toy_config() : load_config(config_path);
        tol.apply(cfg);
        if (horizon) cfg.N = *horizon;
        if (*dump) {
            std::fputs(dump_config(cfg).c_str(), stdout);
            return exit_code::ok;
        }
        CommandResult res;
        if (*toy) res = cmd_toy_example(cfg, opt);
        else if (*ordering) res = cmd_ordering(cfg, opt);
        else if (*sim) res = cmd_simulate(cfg, opt);
        else res = cmd_certify(cfg, m_spec, mhat_spec, opt);
        if (!opt.quiet) {
            for (const auto& f : res.files) std::printf("wrote %s\n", f.c_str());
        }
        return res.exit_code;
    } catch (const Error& e) {
        std::fprintf(stderr, "error [%s]: %s\n", to_string(e.code()), e.what());
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code::error;
    }
}
