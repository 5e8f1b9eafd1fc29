"""Parametric QP for inverter reactive dispatch and a dense active-set solver.

The problem family is

    x(theta) = argmin_x  1/2 x'Ax - x'B theta   s.t.  Cx <= D theta + e

with ``A`` positive definite. For the inverter dispatch instance ``x`` holds
the inverter reactive setpoints and ``theta = [p; q_load]``. Constraint rows
are ordered: lower-voltage block (N), upper-voltage block (N), lower-rating
block (I), upper-rating block (I).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import DimensionMismatch, InfeasibleOpf, IterationLimit
from .feeder import Feeder, GridMatrices

FORMAT_VERSION = 1
ACTIVE_TOL = 1e-7
FEAS_TOL = 1e-9


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITERATION_LIMIT = "IterationLimit"


@dataclass(frozen=True, eq=False)
class MpqpInstance:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    e: np.ndarray

    def __post_init__(self) -> None:
        A, B, C, D, e = (np.asarray(m, dtype=float) for m in (self.A, self.B, self.C, self.D, self.e))
        n_x = A.shape[0]
        if A.shape != (n_x, n_x) or B.shape[0] != n_x or C.shape[1] != n_x:
            raise DimensionMismatch("A, B, C dimensions disagree")
        if D.shape != (C.shape[0], B.shape[1]) or e.shape != (C.shape[0],):
            raise DimensionMismatch("C, D, e dimensions disagree")
        for name, val in zip("ABCDe", (A, B, C, D, e)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_theta(self) -> int:
        return self.B.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.C.shape[0]

    @cached_property
    def A_chol(self):
        return sla.cho_factor(self.A, lower=True)

    @cached_property
    def A_inv(self) -> np.ndarray:
        # Computed once and shared by every scenario solved on this instance.
        inv = sla.cho_solve(self.A_chol, np.eye(self.n_x))
        inv = 0.5 * (inv + inv.T)
        inv.flags.writeable = False
        return inv

    @cached_property
    def A_inv_B(self) -> np.ndarray:
        out = self.A_inv @ self.B
        out.flags.writeable = False
        return out

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_theta,):
            raise DimensionMismatch(f"theta must have length {self.n_theta}, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta has non-finite entries")
        return theta

    def rhs(self, theta) -> np.ndarray:
        return self.D @ theta + self.e

    def objective(self, x, theta) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.A @ x - x @ (self.B @ theta))

    def scaled(self, c: float) -> MpqpInstance:
        """Same feasible set, objective multiplied by ``c``."""
        return MpqpInstance(c * self.A, c * self.B, self.C, self.D, self.e)

    def permuted(self, perm) -> MpqpInstance:
        perm = np.asarray(perm)
        return MpqpInstance(self.A, self.B, self.C[perm], self.D[perm], self.e[perm])

    def to_dict(self) -> dict:
        def mat(m):
            m = np.atleast_2d(m) if m.ndim == 2 else m
            return {"shape": list(m.shape), "data": m.reshape(-1).tolist()}

        return {"format_version": FORMAT_VERSION, **{k: mat(getattr(self, k)) for k in "ABCDe"}}

    @classmethod
    def from_dict(cls, data: dict) -> MpqpInstance:
        def arr(d):
            return np.asarray(d["data"], dtype=float).reshape(d["shape"])

        return cls(*(arr(data[k]) for k in "ABCDe"))

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def assemble_mpqp(gm: GridMatrices, feeder: Feeder) -> MpqpInstance:
    n, n_inv, n_load = gm.n, gm.Fi.shape[1], gm.Fl.shape[1]
    if n != feeder.bus_count or n_inv != feeder.n_inverters or n_load != feeder.n_loads:
        raise DimensionMismatch("grid matrices do not belong to this feeder")
    R, X, Fi, Fl = gm.R, gm.X, gm.Fi, gm.Fl
    A = 2.0 * Fi.T @ R @ Fi
    A = 0.5 * (A + A.T)
    B = np.hstack([np.zeros((n_inv, n)), 2.0 * Fi.T @ R @ Fl])
    XFi = X @ Fi
    eye = np.eye(n_inv)
    C = np.vstack([-XFi, XFi, -eye, eye])
    XFl = X @ Fl
    D = np.vstack(
        [
            np.hstack([R, -XFl]),
            np.hstack([-R, XFl]),
            np.zeros((2 * n_inv, n + n_load)),
        ]
    )
    band = feeder.voltage_band * np.ones(n)
    q_bar = feeder.inverter_ratings
    e = np.concatenate([band, band, q_bar, q_bar])
    return MpqpInstance(A, B, C, D, e)


def constraint_labels(feeder: Feeder) -> list[str]:
    ids = feeder.bus_ids[1:]
    inv = [feeder.bus_ids[b] for b in feeder.inverter_buses]
    return (
        [f"vmin@{b}" for b in ids]
        + [f"vmax@{b}" for b in ids]
        + [f"qmin@{b}" for b in inv]
        + [f"qmax@{b}" for b in inv]
    )


@dataclass
class OpfSolution:
    theta: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    active_set: list[int]
    kkt_residual: float
    status: Status
    iterations: int = 0
    working_set: list[int] = field(default_factory=list)
    near_ties: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def raise_for_status(self, minute: int | None = None) -> None:
        if self.status is Status.INFEASIBLE:
            where = "" if minute is None else f" at minute {minute}"
            raise InfeasibleOpf(f"OPF instance is infeasible{where}", minute=minute)
        if self.status is Status.ITERATION_LIMIT:
            raise IterationLimit("active-set iteration cap exceeded")


def kkt_residual(inst: MpqpInstance, theta, x, lam) -> float:
    theta = inst.check_theta(theta)
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if x.shape != (inst.n_x,) or lam.shape != (inst.n_constraints,):
        raise DimensionMismatch("x or lambda has the wrong length")
    g = inst.C @ x - inst.rhs(theta)
    stationarity = np.max(np.abs(inst.A @ x - inst.B @ theta + inst.C.T @ lam), initial=0.0)
    infeas = max(0.0, float(np.max(g, initial=0.0)))
    neg = max(0.0, float(np.max(-lam, initial=0.0)))
    comp = float(np.max(np.abs(lam * g), initial=0.0))
    return float(max(stationarity, infeas, neg, comp))


def active_tolerance(b: np.ndarray) -> float:
    return ACTIVE_TOL * (1.0 + float(np.max(np.abs(b), initial=0.0)))


def _equality_qp(inst: MpqpInstance, g: np.ndarray, b: np.ndarray, W: list[int]):
    """Minimizer of the QP with rows ``W`` held at equality, and their duals."""
    if not W:
        return inst.A_inv @ g, np.zeros(0)
    Cw = inst.C[W]
    AiCt = inst.A_inv @ Cw.T
    G = Cw @ AiCt
    rhs = Cw @ (inst.A_inv @ g) - b[W]
    try:
        lam_w = sla.cho_solve(sla.cho_factor(G, lower=True), rhs)
    except np.linalg.LinAlgError:
        lam_w = np.linalg.lstsq(G, rhs, rcond=None)[0]
    x = inst.A_inv @ g - AiCt @ lam_w
    return x, lam_w


def _phase_one(inst: MpqpInstance, b: np.ndarray):
    """Point maximizing the smallest slack; ``None`` if the set is empty."""
    n, m = inst.n_x, inst.n_constraints
    cap = 1.0 + float(np.max(np.abs(b)))
    res = linprog(
        c=np.concatenate([np.zeros(n), [-1.0]]),
        A_ub=np.hstack([inst.C, np.ones((m, 1))]),
        b_ub=b,
        bounds=[(None, None)] * n + [(None, cap)],
        method="highs",
    )
    if res.status != 0:
        return None, -np.inf
    return res.x[:n], float(res.x[n])


def solve_qp(
    inst: MpqpInstance,
    theta,
    warm_start: list[int] | None = None,
    max_iter: int | None = None,
) -> OpfSolution:
    """Solve one instance with a primal active-set method.

    Index selection follows Bland's rule (smallest index) for both the
    blocking constraint and the dropped constraint. ``warm_start`` is a
    candidate active set; it is accepted only if its equality-constrained
    solution passes the full KKT check, otherwise the solve starts cold.
    """
    theta = inst.check_theta(theta)
    g = inst.B @ theta
    b = inst.rhs(theta)
    m = inst.n_constraints
    if max_iter is None:
        max_iter = 50 * (m + inst.n_x)
    feas_tol = FEAS_TOL * (1.0 + float(np.max(np.abs(b), initial=0.0)))

    if warm_start:
        W = sorted(set(int(j) for j in warm_start))
        x, lam_w = _equality_qp(inst, g, b, W)
        Cx = inst.C @ x
        if (
            np.all(Cx <= b + feas_tol)
            and np.all(np.abs(Cx[W] - b[W]) <= feas_tol)
            and np.all(lam_w >= -FEAS_TOL)
        ):
            return _finish(inst, theta, b, x, W, np.maximum(lam_w, 0.0), 0)

    x = inst.A_inv @ g
    if np.all(inst.C @ x <= b + feas_tol):
        return _finish(inst, theta, b, x, [], np.zeros(0), 0)

    if np.all(b > 0):
        x = np.zeros(inst.n_x)
    else:
        x, margin = _phase_one(inst, b)
        if x is None or margin < -feas_tol:
            return OpfSolution(
                theta=theta,
                x=np.full(inst.n_x, np.nan),
                lam=np.full(m, np.nan),
                active_set=[],
                kkt_residual=np.inf,
                status=Status.INFEASIBLE,
            )

    W: list[int] = []
    lam_w = np.zeros(0)
    for it in range(1, max_iter + 1):
        x_eq, lam_w = _equality_qp(inst, g, b, W)
        p = x_eq - x
        if np.max(np.abs(p)) <= 1e-12 * (1.0 + np.max(np.abs(x))):
            x = x_eq
            negative = [j for j, lj in zip(W, lam_w) if lj < -FEAS_TOL]
            if not negative:
                return _finish(inst, theta, b, x, W, np.maximum(lam_w, 0.0), it)
            W.remove(min(negative))
            continue
        Cp = inst.C @ p
        slack = np.maximum(b - inst.C @ x, 0.0)
        in_w = np.zeros(m, dtype=bool)
        in_w[W] = True
        blocking = (~in_w) & (Cp > 1e-13 * (1.0 + np.abs(Cp).max()))
        alpha, block = 1.0, None
        for j in np.flatnonzero(blocking):
            a_j = slack[j] / Cp[j]
            if a_j < alpha:
                alpha, block = a_j, int(j)
        x = x + alpha * p
        if block is not None:
            W.append(block)
            W.sort()
    return OpfSolution(
        theta=theta,
        x=x,
        lam=np.zeros(m),
        active_set=[],
        kkt_residual=np.inf,
        status=Status.ITERATION_LIMIT,
        iterations=max_iter,
        working_set=W,
    )


def _finish(inst, theta, b, x, W, lam_w, iterations) -> OpfSolution:
    lam = np.zeros(inst.n_constraints)
    lam[W] = lam_w
    slack = b - inst.C @ x
    tol = active_tolerance(b)
    active = [int(j) for j in np.flatnonzero(np.abs(slack) <= tol)]
    near = [int(j) for j in np.flatnonzero((np.abs(slack) > tol) & (np.abs(slack) <= 100 * tol))]
    return OpfSolution(
        theta=theta,
        x=x,
        lam=lam,
        active_set=sorted(set(active) | set(W)),
        kkt_residual=kkt_residual(inst, theta, x, lam),
        status=Status.OPTIMAL,
        iterations=iterations,
        working_set=list(W),
        near_ties=near,
    )
