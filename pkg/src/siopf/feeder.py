"""Single-phase radial feeder and its linearized (LinDistFlow) matrices.

Voltages are modeled around the flat profile as ``v = R p + X q + v0``, and
ohmic losses as ``2 p'Rp + 2 q'Rq``. ``R`` and ``X`` are built from the
common-path rule: entry ``(m, n)`` sums the line resistances (reactances)
shared by the substation-to-``m`` and substation-to-``n`` paths.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    FeederError,
    NonPositiveImpedance,
    NotATree,
    NotPositiveDefinite,
)

PIVOT_TOL = 1e-12
DEFAULT_POWER_FACTOR = 0.9


@dataclass(frozen=True)
class Line:
    parent: int
    child: int
    r: float
    x: float


@dataclass(frozen=True)
class Feeder:
    """Radial feeder with buses indexed ``0..N`` (``0`` is the substation).

    Lines are stored parent -> child. ``load_nominal_p`` and
    ``load_power_factor`` are optional extras used only by scenario
    calibration.
    """

    bus_count: int
    lines: tuple[Line, ...]
    inverter_buses: tuple[int, ...]
    load_buses: tuple[int, ...]
    inverter_ratings: np.ndarray
    v0: float = 1.0
    voltage_band: float = 0.03
    bus_ids: tuple[str, ...] = ()
    load_nominal_p: np.ndarray | None = None
    load_power_factor: np.ndarray | None = None
    name: str = ""
    _parent: tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self) -> None:
        n = self.bus_count
        if n < 1:
            raise FeederError("feeder needs at least one non-substation bus")
        ratings = np.asarray(self.inverter_ratings, dtype=float).reshape(-1)
        object.__setattr__(self, "inverter_ratings", ratings)
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(str(k) for k in range(n + 1)))
        if len(self.bus_ids) != n + 1:
            raise FeederError("bus_ids must list N+1 identifiers")
        object.__setattr__(self, "_parent", _check_tree(n, self.lines))
        for line in self.lines:
            if not (line.r > 0 and line.x > 0):
                raise NonPositiveImpedance(
                    f"line {self.bus_ids[line.parent]}->{self.bus_ids[line.child]} "
                    f"has r={line.r}, x={line.x}"
                )
        for label, buses in (("inverter", self.inverter_buses), ("load", self.load_buses)):
            if len(set(buses)) != len(buses):
                raise FeederError(f"a bus hosts more than one {label}")
            if any(not 1 <= b <= n for b in buses):
                raise FeederError(f"{label} bus index out of range 1..{n}")
        if ratings.shape != (len(self.inverter_buses),):
            raise DimensionMismatch("one rating per inverter is required")
        if np.any(ratings <= 0):
            raise FeederError("inverter ratings must be strictly positive")
        if self.voltage_band <= 0:
            raise FeederError("voltage band must be positive")
        for attr in ("load_nominal_p", "load_power_factor"):
            val = getattr(self, attr)
            if val is not None:
                val = np.asarray(val, dtype=float).reshape(-1)
                if val.shape != (len(self.load_buses),):
                    raise DimensionMismatch(f"{attr} needs one entry per load")
                object.__setattr__(self, attr, val)
        if self.load_power_factor is not None and np.any(
            (self.load_power_factor <= 0) | (self.load_power_factor > 1)
        ):
            raise FeederError("power factors must lie in (0, 1]")

    @property
    def n_inverters(self) -> int:
        return len(self.inverter_buses)

    @property
    def n_loads(self) -> int:
        return len(self.load_buses)

    @property
    def n_params(self) -> int:
        return self.bus_count + self.n_loads

    def parent_of(self, bus: int) -> int:
        return self._parent[bus]

    def path_to_root(self, bus: int) -> list[int]:
        """Buses on the path from ``bus`` up to (excluding) the substation."""
        path = []
        while bus != 0:
            path.append(bus)
            bus = self._parent[bus]
        return path

    def power_factors(self) -> np.ndarray:
        if self.load_power_factor is None:
            return np.full(self.n_loads, DEFAULT_POWER_FACTOR)
        return self.load_power_factor

    def parameter_support(self) -> np.ndarray:
        """Boolean mask over theta = [p; q_load] of entries that can be nonzero.

        ``p`` is structurally zero at buses without an inverter or a load.
        """
        hosted = np.zeros(self.bus_count, dtype=bool)
        hosted[np.asarray(self.inverter_buses, dtype=int) - 1] = True
        hosted[np.asarray(self.load_buses, dtype=int) - 1] = True
        return np.concatenate([hosted, np.ones(self.n_loads, dtype=bool)])

    # -- serialization -------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> Feeder:
        try:
            ids = [str(b["id"]) for b in data["buses"]]
            raw_lines = [
                (str(ln["from"]), str(ln["to"]), float(ln["r"]), float(ln["x"]))
                for ln in data["lines"]
            ]
            inverters = data.get("inverters", [])
            loads = data.get("loads", [])
        except (KeyError, TypeError) as exc:
            raise FeederError(f"malformed feeder description: {exc!r}") from exc
        if "0" not in ids:
            raise FeederError('the substation bus must have id "0"')
        if len(set(ids)) != len(ids):
            raise FeederError("duplicate bus ids")
        if not raw_lines:
            raise FeederError("feeder has no lines")
        known = set(ids)
        adj: dict[str, list[tuple[str, float, float]]] = {b: [] for b in ids}
        for a, b, r, x in raw_lines:
            if a not in known or b not in known:
                raise FeederError(f"line {a}->{b} references an unknown bus")
            adj[a].append((b, r, x))
            adj[b].append((a, r, x))
        if len(raw_lines) != len(ids) - 1:
            raise NotATree(f"{len(ids)} buses need exactly {len(ids) - 1} lines, got {len(raw_lines)}")
        # BFS from the substation fixes the dense bus order.
        order = ["0"]
        index = {"0": 0}
        oriented: list[tuple[str, str, float, float]] = []
        queue = deque(["0"])
        while queue:
            u = queue.popleft()
            for v, r, x in adj[u]:
                if v in index:
                    continue
                index[v] = len(order)
                order.append(v)
                oriented.append((u, v, r, x))
                queue.append(v)
        if len(order) != len(ids):
            missing = sorted(known - set(order))
            raise NotATree(f"buses not reachable from the substation: {missing}")
        lines = tuple(Line(index[a], index[b], r, x) for a, b, r, x in oriented)

        def bus_index(entry: dict) -> int:
            bus = str(entry["bus"])
            if bus not in index:
                raise FeederError(f"device on unknown bus {bus!r}")
            if index[bus] == 0:
                raise FeederError("devices cannot sit on the substation bus")
            return index[bus]

        try:
            inv_buses = tuple(bus_index(e) for e in inverters)
            ratings = np.array([float(e["q_rating"]) for e in inverters])
            load_buses = tuple(bus_index(e) for e in loads)
            p_nom = None
            if loads and all("p_nom" in e for e in loads):
                p_nom = np.array([float(e["p_nom"]) for e in loads])
            pf = None
            if loads and all("pf" in e for e in loads):
                pf = np.array([float(e["pf"]) for e in loads])
        except (KeyError, TypeError, ValueError) as exc:
            raise FeederError(f"malformed device entry: {exc!r}") from exc
        return cls(
            bus_count=len(ids) - 1,
            lines=lines,
            inverter_buses=inv_buses,
            load_buses=load_buses,
            inverter_ratings=ratings,
            v0=float(data.get("v0", 1.0)),
            voltage_band=float(data.get("voltage_band", 0.03)),
            bus_ids=tuple(order),
            load_nominal_p=p_nom,
            load_power_factor=pf,
            name=str(data.get("name", "")),
        )

    def to_dict(self) -> dict:
        ids = self.bus_ids
        loads = []
        for k, b in enumerate(self.load_buses):
            entry: dict = {"bus": ids[b]}
            if self.load_nominal_p is not None:
                entry["p_nom"] = float(self.load_nominal_p[k])
            if self.load_power_factor is not None:
                entry["pf"] = float(self.load_power_factor[k])
            loads.append(entry)
        return {
            "name": self.name,
            "buses": [{"id": b} for b in ids],
            "lines": [
                {"from": ids[ln.parent], "to": ids[ln.child], "r": ln.r, "x": ln.x}
                for ln in self.lines
            ],
            "inverters": [
                {"bus": ids[b], "q_rating": float(q)}
                for b, q in zip(self.inverter_buses, self.inverter_ratings)
            ],
            "loads": loads,
            "v0": self.v0,
            "voltage_band": self.voltage_band,
        }


def _check_tree(n: int, lines: tuple[Line, ...]) -> tuple[int, ...]:
    if len(lines) != n:
        raise NotATree(f"{n} buses need exactly {n} lines, got {len(lines)}")
    parent = [-1] * (n + 1)
    children: dict[int, list[int]] = {}
    for line in lines:
        if not (0 <= line.parent <= n and 1 <= line.child <= n):
            raise NotATree(f"line {line.parent}->{line.child} out of range")
        if parent[line.child] != -1:
            raise NotATree(f"bus {line.child} has two parents")
        parent[line.child] = line.parent
        children.setdefault(line.parent, []).append(line.child)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in children.get(u, []):
            if v in seen:
                raise NotATree("cycle detected")
            seen.add(v)
            stack.append(v)
    if len(seen) != n + 1:
        raise NotATree("some buses are not reachable from the substation")
    parent[0] = 0
    return tuple(parent)


def load_feeder(path: str | Path) -> Feeder:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederError(f"{path}: not valid JSON ({exc})") from exc
    return Feeder.from_dict(data)


def save_feeder(feeder: Feeder, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(feeder.to_dict(), fh, indent=1)


@dataclass(frozen=True)
class GridMatrices:
    R: np.ndarray
    X: np.ndarray
    Fi: np.ndarray
    Fl: np.ndarray

    @property
    def n(self) -> int:
        return self.R.shape[0]


def build_grid_matrices(feeder: Feeder) -> GridMatrices:
    n = feeder.bus_count
    children: dict[int, list[int]] = {}
    for line in feeder.lines:
        children.setdefault(line.parent, []).append(line.child)
    R = np.zeros((n, n))
    X = np.zeros((n, n))
    # Each line adds its impedance to every pair of buses downstream of it.
    for line in feeder.lines:
        below = []
        stack = [line.child]
        while stack:
            u = stack.pop()
            below.append(u - 1)
            stack.extend(children.get(u, []))
        idx = np.ix_(below, below)
        R[idx] += line.r
        X[idx] += line.x
    for name, mat in (("R", R), ("X", X)):
        _require_pd(mat, name)
    Fi = np.zeros((n, feeder.n_inverters))
    Fi[np.asarray(feeder.inverter_buses, dtype=int) - 1, np.arange(feeder.n_inverters)] = 1.0
    Fl = np.zeros((n, feeder.n_loads))
    Fl[np.asarray(feeder.load_buses, dtype=int) - 1, np.arange(feeder.n_loads)] = 1.0
    for m in (R, X, Fi, Fl):
        m.flags.writeable = False
    return GridMatrices(R=R, X=X, Fi=Fi, Fl=Fl)


def _require_pd(mat: np.ndarray, name: str) -> None:
    try:
        L = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"{name} is not positive definite") from exc
    if np.min(np.diag(L)) ** 2 <= PIVOT_TOL:
        raise NotPositiveDefinite(f"{name} has a pivot below {PIVOT_TOL}")


def _check_injections(gm: GridMatrices, p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (gm.n,) or q.shape != (gm.n,):
        raise DimensionMismatch(f"expected injections of length {gm.n}, got {p.shape} and {q.shape}")
    return p, q


def approx_voltages(gm: GridMatrices, p, q, v0: float = 1.0) -> np.ndarray:
    p, q = _check_injections(gm, p, q)
    return gm.R @ p + gm.X @ q + v0


def approx_losses(gm: GridMatrices, p, q) -> float:
    p, q = _check_injections(gm, p, q)
    return float(2.0 * p @ gm.R @ p + 2.0 * q @ gm.R @ q)
