"""Minimizer sensitivities of the parametric QP from one solved instance.

Inside a critical region the minimizer is affine in theta:

    x(theta) = J theta + A^-1 Ct' G+ et,   G = Ct A^-1 Ct'
    J = A^-1 B - A^-1 Ct' G+ (Ct A^-1 B - Dt)

where ``Ct, Dt, et`` are the active rows. ``G+`` is a pseudo-inverse, so the
formulas stay valid when the active rows are linearly dependent (LICQ fails)
and the active duals are determined only up to a shift in null(Ct').
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import AmbiguousActivity, DegenerateDuals, InfeasibleOpf
from .mpqp import MpqpInstance, OpfSolution, active_tolerance, solve_qp

DUAL_TOL = 1e-7
PINV_RCOND = 1e-10
REGION_MARGIN = 1e-10
RECORD_FORMAT_VERSION = 1


def pinv_psd(G: np.ndarray, rcond: float = PINV_RCOND) -> tuple[np.ndarray, int]:
    """Pseudo-inverse and numerical rank of a symmetric PSD matrix."""
    if G.size == 0:
        return np.zeros_like(G), 0
    w, V = np.linalg.eigh(0.5 * (G + G.T))
    cutoff = rcond * max(float(w[-1]), 0.0)
    keep = w > cutoff
    Vk = V[:, keep]
    return (Vk / w[keep]) @ Vk.T, int(keep.sum())


@dataclass(frozen=True)
class ActivePartition:
    theta: np.ndarray
    active: np.ndarray
    inactive: np.ndarray
    C_act: np.ndarray
    D_act: np.ndarray
    e_act: np.ndarray
    C_in: np.ndarray
    D_in: np.ndarray
    e_in: np.ndarray
    lam_solver: np.ndarray
    # max-min multiplier among all duals consistent with x; see dual_witness
    lam_act: np.ndarray
    dual_margin: float

    @property
    def count(self) -> int:
        return len(self.active)


def dual_witness(C_act: np.ndarray, lam: np.ndarray) -> tuple[np.ndarray, float]:
    """Active duals with the largest smallest entry, and that entry.

    Every ``lam + u`` with ``C_act' u = 0`` satisfies stationarity for the
    same ``x``. When the rows are independent the dual is unique and
    returned as is. Otherwise a small LP maximizes ``min(lam + N z)`` over
    the null-space coordinates ``z``; a positive optimum certifies that a
    strictly complementary dual exists.
    """
    k = len(lam)
    if k == 0:
        return lam.copy(), np.inf
    N = sla.null_space(C_act.T, rcond=1e-10)
    if N.shape[1] == 0:
        return lam.copy(), float(lam.min())
    r = N.shape[1]
    cap = float(np.max(np.abs(lam))) + 1.0
    res = linprog(
        c=np.concatenate([np.zeros(r), [-1.0]]),
        A_ub=np.hstack([-N, np.ones((k, 1))]),
        b_ub=lam,
        bounds=[(None, None)] * r + [(None, cap)],
        method="highs",
    )
    if res.status != 0:
        return lam.copy(), float(lam.min())
    lam_star = lam + N @ res.x[:r]
    return lam_star, float(lam_star.min())


def partition_constraints(inst: MpqpInstance, sol: OpfSolution, tol: float | None = None) -> ActivePartition:
    if not sol.ok:
        raise InfeasibleOpf(f"cannot partition a solution with status {sol.status.value}")
    theta = sol.theta
    b = inst.rhs(theta)
    if tol is None:
        tol = active_tolerance(b)
    slack = b - inst.C @ sol.x
    active_mask = np.abs(slack) <= tol
    if np.any(slack < -tol):
        bad = np.flatnonzero(slack < -tol).tolist()
        raise AmbiguousActivity(f"rows {bad} are violated beyond the activity tolerance")
    conflicting = (~active_mask) & (sol.lam > DUAL_TOL)
    if np.any(conflicting):
        bad = np.flatnonzero(conflicting).tolist()
        raise AmbiguousActivity(f"rows {bad} are slack but carry positive duals")
    act = np.flatnonzero(active_mask)
    ina = np.flatnonzero(~active_mask)
    C_act = inst.C[act]
    lam_solver = sol.lam[act]
    lam_act, margin = dual_witness(C_act, lam_solver)
    return ActivePartition(
        theta=theta,
        active=act,
        inactive=ina,
        C_act=C_act,
        D_act=inst.D[act],
        e_act=inst.e[act],
        C_in=inst.C[ina],
        D_in=inst.D[ina],
        e_in=inst.e[ina],
        lam_solver=lam_solver,
        lam_act=lam_act,
        dual_margin=margin,
    )


@dataclass(frozen=True)
class _RegionAlgebra:
    G_pinv: np.ndarray
    rank: int
    AiCt: np.ndarray  # A^-1 Ct'
    K: np.ndarray  # Ct A^-1 B - Dt


def _algebra(inst: MpqpInstance, part: ActivePartition) -> _RegionAlgebra:
    AiCt = inst.A_inv @ part.C_act.T
    G = part.C_act @ AiCt
    G_pinv, rank = pinv_psd(G)
    K = part.C_act @ inst.A_inv_B - part.D_act
    return _RegionAlgebra(G_pinv, rank, AiCt, K)


def _require_nondegenerate(part: ActivePartition, dual_tol: float) -> None:
    if part.count and part.dual_margin <= dual_tol:
        raise DegenerateDuals(
            f"smallest achievable active dual is {part.dual_margin:.3g} <= {dual_tol:g}"
        )


def jacobian(inst: MpqpInstance, part: ActivePartition, dual_tol: float = DUAL_TOL) -> tuple[np.ndarray, bool]:
    """Return ``(J, licq_holds)`` for the critical region of ``part``."""
    _require_nondegenerate(part, dual_tol)
    if part.count == 0:
        return inst.A_inv_B.copy(), True
    alg = _algebra(inst, part)
    J = inst.A_inv_B - alg.AiCt @ (alg.G_pinv @ alg.K)
    return J, alg.rank == part.count


def affine_offset(inst: MpqpInstance, part: ActivePartition, dual_tol: float = DUAL_TOL) -> np.ndarray:
    _require_nondegenerate(part, dual_tol)
    if part.count == 0:
        return np.zeros(inst.n_x)
    alg = _algebra(inst, part)
    return alg.AiCt @ (alg.G_pinv @ part.e_act)


@dataclass(frozen=True)
class CriticalRegion:
    """Strict inequalities describing where the base affine law stays optimal.

    ``lam_new = lam_gain @ theta + lam_shift`` must stay positive and
    ``slack_gain @ theta < slack_bound`` must hold for the inactive rows.
    """

    lam_gain: np.ndarray
    lam_shift: np.ndarray
    slack_gain: np.ndarray
    slack_bound: np.ndarray
    J: np.ndarray
    offset: np.ndarray

    def contains(self, theta, margin: float = REGION_MARGIN) -> bool:
        if self.lam_gain.shape[0] and not np.all(self.lam_gain @ theta + self.lam_shift > margin):
            return False
        return bool(np.all(self.slack_gain @ theta < self.slack_bound - margin))

    def predict(self, theta) -> np.ndarray:
        return self.J @ theta + self.offset


def critical_region(inst: MpqpInstance, part: ActivePartition) -> CriticalRegion:
    """Region of ``part`` with the null-space shift ``u`` fixed by the dual witness.

    In the dependent-rows case a fixed ``u`` can make the test conservative.
    """
    if part.count:
        alg = _algebra(inst, part)
        J = inst.A_inv_B - alg.AiCt @ (alg.G_pinv @ alg.K)
        off = alg.AiCt @ (alg.G_pinv @ part.e_act)
        lam_gain = alg.G_pinv @ alg.K
        lam_part = lam_gain @ part.theta - alg.G_pinv @ part.e_act
        u = part.lam_act - lam_part
        lam_shift = u - alg.G_pinv @ part.e_act
    else:
        J = inst.A_inv_B.copy()
        off = np.zeros(inst.n_x)
        lam_gain = np.zeros((0, inst.n_theta))
        lam_shift = np.zeros(0)
    slack_gain = part.C_in @ J - part.D_in
    slack_bound = part.e_in - part.C_in @ off
    return CriticalRegion(lam_gain, lam_shift, slack_gain, slack_bound, J, off)


def in_critical_region(inst: MpqpInstance, part: ActivePartition, theta_new) -> bool:
    theta_new = inst.check_theta(theta_new)
    return critical_region(inst, part).contains(theta_new)


@dataclass
class SensitivityRecord:
    theta: np.ndarray
    x: np.ndarray
    jacobian: np.ndarray | None
    degenerate: bool
    active_set: list[int]
    licq_holds: bool
    minute: int | None = None

    def to_json(self) -> str:
        obj = {
            "format_version": RECORD_FORMAT_VERSION,
            "theta": self.theta.tolist(),
            "x": self.x.tolist(),
            "jacobian": None if self.jacobian is None else self.jacobian.tolist(),
            "degenerate": bool(self.degenerate),
            "active_set": [int(j) for j in self.active_set],
            "licq": bool(self.licq_holds),
        }
        if self.minute is not None:
            obj["minute"] = int(self.minute)
        return json.dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> SensitivityRecord:
        obj = json.loads(line)
        jac = obj.get("jacobian")
        return cls(
            theta=np.asarray(obj["theta"], dtype=float),
            x=np.asarray(obj["x"], dtype=float),
            jacobian=None if jac is None else np.asarray(jac, dtype=float),
            degenerate=bool(obj["degenerate"]),
            active_set=list(obj["active_set"]),
            licq_holds=bool(obj["licq"]),
            minute=obj.get("minute"),
        )


def build_record(
    inst: MpqpInstance,
    theta,
    dual_tol: float = DUAL_TOL,
    with_jacobian: bool = True,
    minute: int | None = None,
    warm_start: list[int] | None = None,
) -> SensitivityRecord:
    """Solve at ``theta`` and attach the minimizer Jacobian when it exists.

    Samples whose active constraints admit no strictly positive dual are
    flagged degenerate and carry no Jacobian.
    """
    sol = solve_qp(inst, theta, warm_start=warm_start)
    sol.raise_for_status(minute)
    part = partition_constraints(inst, sol)
    degenerate = bool(part.count and part.dual_margin <= dual_tol)
    if part.count:
        _, rank = pinv_psd(part.C_act @ inst.A_inv @ part.C_act.T)
        licq = rank == part.count
    else:
        licq = True
    J = None
    if with_jacobian and not degenerate:
        J, _ = jacobian(inst, part, dual_tol)
    return SensitivityRecord(
        theta=sol.theta,
        x=sol.x,
        jacobian=J,
        degenerate=degenerate,
        active_set=[int(j) for j in part.active],
        licq_holds=licq,
        minute=minute,
    )


def write_records(records, path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_records(path: str | Path) -> list[SensitivityRecord]:
    with open(path) as fh:
        return [SensitivityRecord.from_json(line) for line in fh if line.strip()]


def fd_jacobian(
    inst: MpqpInstance,
    part: ActivePartition,
    coords=None,
    rel_step: float = 1e-5,
    max_halvings: int = 20,
    warm_start: list[int] | None = None,
) -> np.ndarray:
    """Central finite differences of the minimizer, one column per coordinate.

    Each step starts at ``rel_step * (1 + |theta_k|)`` and is halved until
    both probe points stay inside the base critical region. Columns not in
    ``coords`` are left as NaN.
    """
    theta = part.theta
    n = inst.n_theta
    region = critical_region(inst, part)
    coords = range(n) if coords is None else coords
    out = np.full((inst.n_x, n), np.nan)
    for k in coords:
        h = rel_step * (1.0 + abs(theta[k]))
        for _ in range(max_halvings + 1):
            tp = theta.copy()
            tm = theta.copy()
            tp[k] += h
            tm[k] -= h
            if region.contains(tp) and region.contains(tm):
                break
            h *= 0.5
        sp = solve_qp(inst, tp, warm_start=warm_start)
        sm = solve_qp(inst, tm, warm_start=warm_start)
        sp.raise_for_status()
        sm.raise_for_status()
        out[:, k] = (sp.x - sm.x) / (2.0 * h)
    return out
