import numpy as np
import pytest

import bilevel_mpc as bm


@pytest.fixture(scope="module")
def toy():
    cfg = bm.toy_config()
    return cfg, bm.make_instance(cfg)


def test_equivalence(toy):
    cfg, inst = toy
    p2 = bm.solve_p2(inst, cfg.x0)
    p3 = bm.solve_p3(inst, cfg.x0)
    p1 = bm.solve_p1_oracle(inst, cfg.x0)
    assert p2.status == "optimal"
    assert abs(p2.value - p3.value) < 1e-9
    assert abs(p1.value - p2.value) < 1e-6
    assert np.max(np.abs(p2.U - p3.U)) < 1e-6
    assert abs(inst.upper_cost(p2.U, cfg.x0) - p2.value) < 1e-9


def test_blocking_and_certificate(toy):
    cfg, inst = toy
    M3 = bm.leading_free(3, inst.N, inst.m)
    full = np.eye(inst.N * inst.m)
    gap = bm.solve_p2(inst, cfg.x0, M3).value - bm.solve_p2(inst, cfg.x0).value
    cert = bm.blocked_gap_certificate(inst, M3, full, cfg.x0, 0.5)
    assert cert.status == "issued"
    assert -1e-9 <= gap <= cert.delta + 1e-9
    h = bm.hmpc_gap_certificate(inst, cfg.x0)
    assert h.label == "V0 - V2"


def test_constructed_blocking(toy):
    cfg, inst = toy
    samples = bm.sample_box(cfg.x0, np.full(2, 0.2), 50, 1)
    out = bm.construct_from_p0(inst, samples)
    assert out["rank"] == 2
    assert out["M"].shape == (10, 2)


def test_simulation(toy):
    cfg, inst = toy
    a = bm.simulate(inst, "p2", cfg.x0, 20)
    b = bm.simulate(inst, "p3", cfg.x0, 20)
    assert a.completed and a.states.shape == (21, 2) and a.inputs.shape == (20, 1)
    assert np.max(np.abs(a.inputs - b.inputs)) < 1e-6
    assert bm.trace_metrics(inst, a)["steps"] == 20
    assert a.csv().startswith("k,x1,x2,u1")


def test_errors_carry_a_code(toy):
    cfg, inst = toy
    with pytest.raises(bm.BmpcError) as info:
        bm.parse_config("{")
    assert info.value.args[0] == "config"
    with pytest.raises(bm.BmpcError) as info:
        bm.solve_p1_oracle(inst, cfg.x0, cap=3)
    assert info.value.args[0] == "cap_exceeded"


def test_config_round_trip():
    text = bm.toy_config().dump()
    assert bm.parse_config(text).dump() == text
