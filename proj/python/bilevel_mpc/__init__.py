"""Bilevel MPC: hierarchical, reduced and centralized formulations of a
reference-tracking cascade, move blocking and a-posteriori gap bounds."""

from ._core import (
    BmpcError,
    GapCertificate,
    Instance,
    ProblemConfig,
    SolveReport,
    Trace,
    blocked_gap_certificate,
    construct_from_p0,
    hmpc_gap_certificate,
    leading_free,
    load_config,
    make_instance,
    parse_config,
    sample_box,
    simulate,
    solve_hmpc,
    solve_lower,
    solve_p1_oracle,
    solve_p2,
    solve_p3,
    theta_star_map,
    toy_config,
    trace_metrics,
    u_star_map,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
