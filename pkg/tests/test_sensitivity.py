from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import LICQ_THETA
from oracles import random_feeder
from siopf.errors import AmbiguousActivity, DegenerateDuals
from siopf.feeder import build_grid_matrices
from siopf.mpqp import active_tolerance, assemble_mpqp, constraint_labels, solve_qp
from siopf.sensitivity import (
    DUAL_TOL,
    SensitivityRecord,
    affine_offset,
    build_record,
    critical_region,
    fd_jacobian,
    in_critical_region,
    jacobian,
    partition_constraints,
    pinv_psd,
    read_records,
    write_records,
)


def _part(inst, theta):
    return partition_constraints(inst, solve_qp(inst, theta))


def _restrict(inst, part, keep):
    """Same solution, but with only the listed active rows kept."""
    keep = np.asarray(keep)
    act = part.active[keep]
    return replace(
        part,
        active=act,
        C_act=inst.C[act],
        D_act=inst.D[act],
        e_act=inst.e[act],
        lam_solver=part.lam_solver[keep],
        lam_act=part.lam_act[keep],
    )


def _rel_fro(a, b):
    return np.linalg.norm(a - b) / (1.0 + np.linalg.norm(b))


# -- pseudo-inverse ----------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 8), rank=st.integers(0, 8), seed=st.integers(0, 2**31))
def test_pinv_penrose_identities(n, rank, seed):
    rng = np.random.default_rng(seed)
    rank = min(rank, n)
    V = rng.normal(size=(n, rank))
    G = V @ V.T
    P, r = pinv_psd(G)
    assert r == (np.linalg.matrix_rank(G) if rank else 0)
    scale = 1.0 + np.abs(G).max()
    np.testing.assert_allclose(G @ P @ G, G, atol=1e-10 * scale)
    np.testing.assert_allclose(P @ G @ P, P, atol=1e-10 * (1.0 + np.abs(P).max()))
    np.testing.assert_allclose(P, P.T, atol=1e-12 * (1.0 + np.abs(P).max()))


def test_pinv_on_every_day_gram(ieee37, synthetic_day):
    inst = ieee37.inst
    for rec in synthetic_day.records:
        if not rec.active_set:
            continue
        Ct = inst.C[rec.active_set]
        G = Ct @ inst.A_inv @ Ct.T
        P, _ = pinv_psd(G)
        np.testing.assert_allclose(G @ P @ G, G, atol=1e-10 * (1 + np.abs(G).max()))
        np.testing.assert_allclose(P @ G @ P, P, atol=1e-10 * (1 + np.abs(P).max()))


# -- the five-bus LICQ construction -----------------------------------------


def test_licq_scenario_active_rows(five_bus):
    inst, f = five_bus.inst, five_bus.feeder
    part = _part(inst, LICQ_THETA)
    labels = constraint_labels(f)
    assert [labels[j] for j in part.active] == ["vmin@3", "vmin@4"]
    x1 = f.lines[0].x
    np.testing.assert_allclose(part.C_act, -np.array([[x1, x1], [x1, x1]]), atol=1e-15)
    assert np.linalg.matrix_rank(part.C_act) == 1


def test_licq_scenario_jacobian_exists(five_bus):
    inst = five_bus.inst
    part = _part(inst, LICQ_THETA)
    J, licq = jacobian(inst, part)
    assert not licq
    assert np.all(np.isfinite(J))
    off = affine_offset(inst, part)
    np.testing.assert_allclose(J @ LICQ_THETA + off, solve_qp(inst, LICQ_THETA).x, atol=1e-8)
    rec = build_record(inst, LICQ_THETA)
    assert not rec.degenerate and not rec.licq_holds and rec.jacobian is not None


def test_licq_scenario_matches_finite_differences(five_bus):
    inst, f = five_bus.inst, five_bus.feeder
    part = _part(inst, LICQ_THETA)
    J, _ = jacobian(inst, part)
    # all columns, including the device-free bus 4
    fd = fd_jacobian(inst, part)
    assert _rel_fro(J, fd) <= 1e-6
    support = f.parameter_support()
    assert _rel_fro(J[:, support], fd[:, support]) <= 1e-6


def test_duplicate_row_does_not_change_jacobian(five_bus):
    inst, f = five_bus.inst, five_bus.feeder
    part = _part(inst, LICQ_THETA)
    J_both, licq_both = jacobian(inst, part)
    J_one, licq_one = jacobian(inst, _restrict(inst, part, [0]))
    assert not licq_both and licq_one
    support = f.parameter_support()
    np.testing.assert_allclose(J_both[:, support], J_one[:, support], atol=1e-9)


def test_dual_shift_along_nullspace_keeps_x(five_bus):
    inst = five_bus.inst
    part = _part(inst, LICQ_THETA)
    Nul = sla.null_space(part.C_act.T)
    assert Nul.shape[1] == 1
    g = inst.B @ LICQ_THETA
    x_a = inst.A_inv @ (g - part.C_act.T @ part.lam_act)
    shifted = part.lam_act + 0.05 * Nul[:, 0]
    assert np.all(shifted > 0) and not np.allclose(shifted, part.lam_act)
    x_b = inst.A_inv @ (g - part.C_act.T @ shifted)
    np.testing.assert_allclose(x_a, x_b, atol=1e-10)


def test_local_affinity_in_licq_region(five_bus):
    inst, f = five_bus.inst, five_bus.feeder
    part = _part(inst, LICQ_THETA)
    region = critical_region(inst, part)
    x0 = solve_qp(inst, LICQ_THETA).x
    rng = np.random.default_rng(0)
    support = f.parameter_support()
    for _ in range(100):
        d = np.where(support, rng.normal(size=5), 0.0) * 1e-3
        while not region.contains(LICQ_THETA + d):
            d *= 0.5
        x = solve_qp(inst, LICQ_THETA + d).x
        np.testing.assert_allclose(x - x0, region.J @ d, atol=1e-8)


# -- degenerate records -------------------------------------------------------


def test_weakly_active_constraint_is_degenerate(five_bus):
    inst = five_bus.inst
    base = LICQ_THETA / 0.7

    def margin(P):
        part = _part(inst, base * P)
        return part.count, part.dual_margin

    lo, hi = 0.55, 0.7  # no active rows at lo, positive duals at hi
    assert margin(lo)[0] == 0 and margin(hi)[1] > DUAL_TOL
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        count, m = margin(mid)
        if count and m <= DUAL_TOL:
            break
        if count:
            hi = mid
        else:
            lo = mid
    theta = base * mid
    rec = build_record(inst, theta)
    assert rec.degenerate and rec.jacobian is None
    with pytest.raises(DegenerateDuals):
        jacobian(inst, _part(inst, theta))


# -- generic instances ---------------------------------------------------------


def test_zero_theta_record(five_bus):
    inst = five_bus.inst
    part = _part(inst, np.zeros(5))
    assert part.count == 0 and len(part.inactive) == inst.n_constraints
    rec = build_record(inst, np.zeros(5))
    np.testing.assert_array_equal(rec.x, 0.0)
    np.testing.assert_allclose(rec.jacobian, inst.A_inv_B, atol=0)
    assert not rec.degenerate and rec.licq_holds
    np.testing.assert_array_equal(affine_offset(inst, part), 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_partition_agrees_with_slack_recomputation(seed):
    rng = np.random.default_rng(seed)
    f = random_feeder(6, 3, 4, rng)
    inst = assemble_mpqp(build_grid_matrices(f), f)
    theta = rng.normal(size=inst.n_theta)
    sol = solve_qp(inst, theta)
    while not sol.ok:
        theta *= 0.7
        sol = solve_qp(inst, theta)
    part = partition_constraints(inst, sol)
    b = inst.rhs(theta)
    slack = b - inst.C @ sol.x
    tol = active_tolerance(b)
    np.testing.assert_array_equal(part.active, np.flatnonzero(np.abs(slack) <= tol))
    assert sorted(np.concatenate([part.active, part.inactive]).tolist()) == list(range(inst.n_constraints))
    np.testing.assert_array_equal(sol.lam[part.inactive], 0.0)


def test_slack_row_with_dual_is_ambiguous(five_bus):
    inst = five_bus.inst
    sol = solve_qp(inst, np.zeros(5))
    sol.lam = sol.lam.copy()
    sol.lam[0] = 1.0
    with pytest.raises(AmbiguousActivity):
        partition_constraints(inst, sol)


def _constrained_day(synthetic_day, count):
    out = [r for r in synthetic_day.records if r.active_set and not r.degenerate]
    return out[:: max(1, len(out) // count)][:count]


def test_day_jacobians_match_finite_differences(ieee37, synthetic_day):
    inst = ieee37.inst
    for rec in _constrained_day(synthetic_day, 40):
        part = _part(inst, rec.theta)
        fd = fd_jacobian(inst, part, warm_start=rec.active_set)
        assert _rel_fro(rec.jacobian, fd) <= 1e-6


def test_day_offset_identity(ieee37, synthetic_day):
    inst = ieee37.inst
    for rec in synthetic_day.records[::7]:
        part = _part(inst, rec.theta)
        J, _ = jacobian(inst, part)
        np.testing.assert_allclose(J @ rec.theta + affine_offset(inst, part), rec.x, atol=1e-8)


def test_empty_active_set_jacobian(ieee37, synthetic_day):
    rec = next(r for r in synthetic_day.records if not r.active_set)
    J, licq = jacobian(ieee37.inst, _part(ieee37.inst, rec.theta))
    np.testing.assert_array_equal(J, ieee37.inst.A_inv_B)
    assert licq


def test_region_contains_base_and_tiny_steps(ieee37, synthetic_day):
    inst, f = ieee37.inst, ieee37.feeder
    rng = np.random.default_rng(2)
    support = f.parameter_support()
    for rec in _constrained_day(synthetic_day, 10):
        part = _part(inst, rec.theta)
        assert in_critical_region(inst, part, rec.theta)
        d = np.where(support, rng.normal(size=inst.n_theta), 0.0)
        d *= 1e-7 / np.abs(d).max()
        assert in_critical_region(inst, part, rec.theta + d)
        x = solve_qp(inst, rec.theta + d).x
        np.testing.assert_allclose(x, rec.x + rec.jacobian @ d, atol=1e-9)


def test_region_excludes_points_with_other_active_sets(five_bus):
    inst = five_bus.inst
    base = LICQ_THETA * (0.5 / 0.7)  # unconstrained
    part = _part(inst, base)
    assert part.count == 0
    found = 0
    for s in (1.3, 1.5, 1.7, 100.0):
        theta = base * s
        sol = solve_qp(inst, theta)
        if sol.ok and sol.active_set != list(part.active):
            assert not in_critical_region(inst, part, theta)
            found += 1
    assert found >= 2


def test_records_round_trip(tmp_path, five_bus):
    recs = [build_record(five_bus.inst, LICQ_THETA, minute=3), build_record(five_bus.inst, np.zeros(5))]
    recs.append(SensitivityRecord(np.ones(5), np.ones(2), None, True, [2, 3], False, 9))
    path = tmp_path / "r.jsonl"
    write_records(recs, path)
    back = read_records(path)
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.x, b.x)
        if a.jacobian is None:
            assert b.jacobian is None
        else:
            np.testing.assert_array_equal(a.jacobian, b.jacobian)
        assert (a.degenerate, a.active_set, a.licq_holds, a.minute) == (b.degenerate, b.active_set, b.licq_holds, b.minute)
