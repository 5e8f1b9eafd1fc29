"""Daily load/solar profiles, parameter vectors, and labeled OPF datasets."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, DegenerateProfile, DimensionMismatch
from .feeder import Feeder, GridMatrices
from .mpqp import MpqpInstance
from .sensitivity import SensitivityRecord, build_record, write_records

log = logging.getLogger(__name__)

MINUTES = 1440
FORMAT_VERSION = 1


@dataclass
class DayProfiles:
    load_p: np.ndarray  # L x 1440
    load_q: np.ndarray  # L x 1440
    solar_p: np.ndarray  # I x 1440
    provenance: str = "synthetic"

    def __post_init__(self) -> None:
        for name in ("load_p", "load_q", "solar_p"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if arr.shape[1] != MINUTES:
                raise DimensionMismatch(f"{name} must have {MINUTES} columns")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise BadConfig(f"{name} must be finite and nonnegative")
            setattr(self, name, arr)
        if self.load_q.shape != self.load_p.shape:
            raise DimensionMismatch("load_p and load_q shapes differ")

    def check_feeder(self, feeder: Feeder) -> None:
        if self.load_p.shape[0] != feeder.n_loads or self.solar_p.shape[0] != feeder.n_inverters:
            raise DimensionMismatch(
                f"profiles have {self.load_p.shape[0]} loads / {self.solar_p.shape[0]} solar rows, "
                f"feeder has {feeder.n_loads} / {feeder.n_inverters}"
            )


@dataclass
class GenConfig:
    """Shape family for synthetic days (times in hours, levels relative)."""

    load_floor: float = 0.45
    morning_peak: tuple[float, float, float] = (7.5, 1.2, 0.35)  # hour, width, height
    evening_peak: tuple[float, float, float] = (19.0, 2.0, 0.6)
    peak_shift_minutes: float = 40.0
    load_noise: float = 0.08
    load_tau: float = 20.0
    load_ramp: float = 0.05
    solar_window: tuple[float, float] = (6.0, 20.0)
    solar_noise: float = 0.35
    solar_tau: float = 8.0
    solar_ramp: float = 0.15
    load_levels: list[float] | None = None

    def validate(self) -> None:
        lo, hi = self.solar_window
        if not 0 <= lo < hi <= 24:
            raise BadConfig("solar window must satisfy 0 <= start < end <= 24")
        if min(self.load_tau, self.solar_tau) <= 0:
            raise BadConfig("noise time constants must be positive")
        if min(self.load_noise, self.solar_noise, self.peak_shift_minutes) < 0:
            raise BadConfig("noise amplitudes must be nonnegative")
        if min(self.load_ramp, self.solar_ramp) <= 0:
            raise BadConfig("ramp limits must be positive")
        if self.load_floor < 0:
            raise BadConfig("load floor must be nonnegative")


def load_shape(cfg: GenConfig, shift_minutes: float = 0.0) -> np.ndarray:
    """Bimodal demand shape over one day, one value per minute."""
    t = np.arange(MINUTES) / 60.0 - shift_minutes / 60.0
    out = np.full(MINUTES, cfg.load_floor)
    for hour, width, height in (cfg.morning_peak, cfg.evening_peak):
        out = out + height * np.exp(-0.5 * ((t - hour) / width) ** 2)
    return out


def solar_shape(cfg: GenConfig) -> np.ndarray:
    """Clear-sky bell: a half sine over the daylight window, zero elsewhere."""
    t = np.arange(MINUTES) / 60.0
    lo, hi = cfg.solar_window
    inside = (t >= lo) & (t <= hi)
    out = np.zeros(MINUTES)
    out[inside] = np.sin(np.pi * (t[inside] - lo) / (hi - lo))
    return out


def _ou(rng: np.random.Generator, tau: float, n: int = MINUTES) -> np.ndarray:
    """Unit-variance Ornstein-Uhlenbeck path sampled once per minute."""
    a = math.exp(-1.0 / tau)
    s = math.sqrt(1.0 - a * a)
    z = rng.standard_normal(n)
    out = np.empty(n)
    out[0] = z[0]
    for k in range(1, n):
        out[k] = a * out[k - 1] + s * z[k]
    return out


def _ramp_limit(target: np.ndarray, ramp: float) -> np.ndarray:
    out = np.empty_like(target)
    out[0] = target[0]
    for k in range(1, len(target)):
        out[k] = min(max(target[k], out[k - 1] - ramp), out[k - 1] + ramp)
    return out


def generate_profiles(feeder: Feeder, cfg: GenConfig | None = None, seed: int = 0) -> DayProfiles:
    """Synthetic day with one load profile per load and one solar profile per inverter.

    Loads are scaled by ``cfg.load_levels`` (default: the feeder's nominal
    loads, or 1). Solar profiles are normalized to a unit clear-sky peak;
    use :func:`calibrate_profiles` to apply energy and percentile scaling.
    """
    cfg = cfg or GenConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_load, n_inv = feeder.n_loads, feeder.n_inverters
    if cfg.load_levels is not None:
        levels = np.asarray(cfg.load_levels, dtype=float)
        if levels.shape != (n_load,):
            raise BadConfig("load_levels needs one entry per load")
    elif feeder.load_nominal_p is not None:
        levels = feeder.load_nominal_p
    else:
        levels = np.ones(n_load)

    load_p = np.empty((n_load, MINUTES))
    for k in range(n_load):
        shift = cfg.peak_shift_minutes * rng.uniform(-1.0, 1.0)
        base = load_shape(cfg, shift)
        noisy = base * np.maximum(1.0 + cfg.load_noise * _ou(rng, cfg.load_tau), 0.0)
        load_p[k] = levels[k] * _ramp_limit(noisy, cfg.load_ramp)

    sun = solar_shape(cfg)
    daylight = sun > 0
    solar_p = np.empty((n_inv, MINUTES))
    # shared cloud field plus a local component per site
    common = _ou(rng, cfg.solar_tau)
    for k in range(n_inv):
        cloud = 0.7 * common + math.sqrt(1 - 0.49) * _ou(rng, cfg.solar_tau)
        factor = np.clip(1.0 + cfg.solar_noise * cloud, 0.0, 1.0 + cfg.solar_noise)
        row = _ramp_limit(sun * factor, cfg.solar_ramp)
        solar_p[k] = np.where(daylight, np.maximum(row, 0.0), 0.0)
    return DayProfiles(load_p, np.zeros_like(load_p), solar_p, provenance=f"synthetic(seed={seed})")


@dataclass
class CalibrationConfig:
    percentile: float = 97.0
    penetration: float = 0.75
    total_nominal: float | None = None
    power_factors: list[float] | None = None


def calibrate_profiles(
    profiles: DayProfiles, feeder: Feeder, calib: CalibrationConfig | None = None
) -> DayProfiles:
    """Scale loads to the nominal total at a load-duration percentile, size solar
    to a share of daily load energy, and derive reactive loads from power factors.

    All solar sites share one rating (a common scale factor).
    """
    calib = calib or CalibrationConfig()
    profiles.check_feeder(feeder)
    total = profiles.load_p.sum(axis=0)
    if not np.any(total > 0):
        raise DegenerateProfile("all-zero load profiles cannot be calibrated")
    if calib.total_nominal is not None:
        nominal = float(calib.total_nominal)
    elif feeder.load_nominal_p is not None:
        nominal = float(feeder.load_nominal_p.sum())
    else:
        raise BadConfig("need total_nominal or per-load p_nom in the feeder")
    ref = float(np.percentile(total, calib.percentile))
    if ref <= 0:
        raise DegenerateProfile("load-duration percentile is zero")
    load_p = profiles.load_p * (nominal / ref)

    solar = profiles.solar_p.copy()
    peaks = solar.max(axis=1)
    solar[peaks > 0] /= peaks[peaks > 0, None]
    solar_energy = solar.sum()
    if calib.penetration < 0:
        raise BadConfig("penetration must be nonnegative")
    if calib.penetration == 0:
        solar[:] = 0.0
    elif solar_energy <= 0:
        raise DegenerateProfile("positive penetration requested but solar profiles are all zero")
    else:
        solar *= calib.penetration * load_p.sum() / solar_energy

    pf = np.asarray(calib.power_factors, dtype=float) if calib.power_factors is not None else feeder.power_factors()
    if pf.shape != (feeder.n_loads,):
        raise BadConfig("power_factors needs one entry per load")
    load_q = load_p * np.tan(np.arccos(pf))[:, None]
    return DayProfiles(load_p, load_q, solar, provenance=profiles.provenance + "+calibrated")


def theta_at(profiles: DayProfiles, gm: GridMatrices, minute: int) -> np.ndarray:
    """``theta = [Fi p_solar - Fl p_load; q_load]`` at one minute."""
    if not 0 <= minute < MINUTES:
        raise IndexError(f"minute {minute} outside 0..{MINUTES - 1}")
    if profiles.solar_p.shape[0] != gm.Fi.shape[1] or profiles.load_p.shape[0] != gm.Fl.shape[1]:
        raise DimensionMismatch("profiles do not match the placement matrices")
    p = gm.Fi @ profiles.solar_p[:, minute] - gm.Fl @ profiles.load_p[:, minute]
    return np.concatenate([p, profiles.load_q[:, minute]])


def theta_matrix(profiles: DayProfiles, gm: GridMatrices) -> np.ndarray:
    """All 1440 parameter vectors as rows."""
    p = profiles.solar_p.T @ gm.Fi.T - profiles.load_p.T @ gm.Fl.T
    return np.hstack([p, profiles.load_q.T])


# -- CSV import/export ------------------------------------------------------


def save_profiles_csv(profiles: DayProfiles, feeder: Feeder, path: str | Path) -> None:
    ids = feeder.bus_ids
    header = (
        [f"load_p:{ids[b]}" for b in feeder.load_buses]
        + [f"load_q:{ids[b]}" for b in feeder.load_buses]
        + [f"solar_p:{ids[b]}" for b in feeder.inverter_buses]
    )
    data = np.vstack([profiles.load_p, profiles.load_q, profiles.solar_p]).T
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def load_profiles_csv(path: str | Path, feeder: Feeder) -> DayProfiles:
    """Read minute rows with ``load_p:<bus>``, ``load_q:<bus>``, ``solar_p:<bus>`` columns.

    Missing ``load_q`` columns are filled with zeros (calibration derives them).
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise BadConfig(f"{path}: empty profiles file")
    header, body = rows[0], rows[1:]
    if len(body) != MINUTES:
        raise BadConfig(f"{path}: expected {MINUTES} data rows, got {len(body)}")
    try:
        data = np.array(body, dtype=float)
    except ValueError as exc:
        raise BadConfig(f"{path}: non-numeric entry") from exc
    cols = {name.strip(): k for k, name in enumerate(header)}
    ids = feeder.bus_ids

    def block(prefix: str, buses, required: bool) -> np.ndarray:
        out = np.zeros((len(buses), MINUTES))
        for r, b in enumerate(buses):
            key = f"{prefix}:{ids[b]}"
            if key in cols:
                out[r] = data[:, cols[key]]
            elif required:
                raise BadConfig(f"{path}: missing column {key}")
        return out

    return DayProfiles(
        load_p=block("load_p", feeder.load_buses, True),
        load_q=block("load_q", feeder.load_buses, False),
        solar_p=block("solar_p", feeder.inverter_buses, True),
        provenance=f"file({path})",
    )


# -- datasets --------------------------------------------------------------


@dataclass
class DatasetSpec:
    """Which minutes are eligible and which of them go to training.

    Sampling rules: ``every_minutes`` takes every k-th eligible minute
    starting at the window start; ``fraction`` draws that share of eligible
    minutes at random (seeded); ``train_count`` draws an exact number.
    Remaining eligible minutes form the test split.
    """

    hour: int | None = None
    every_minutes: int | None = None
    fraction: float | None = None
    train_count: int | None = None
    exclude_before_hour: int = 0
    seed: int = 0

    def validate(self) -> None:
        rules = [r is not None for r in (self.every_minutes, self.fraction, self.train_count)]
        if sum(rules) != 1:
            raise BadConfig("choose exactly one of every_minutes, fraction, train_count")
        if self.hour is not None and not 0 <= self.hour < 24:
            raise BadConfig("hour must be in 0..23")
        if self.every_minutes is not None and self.every_minutes < 1:
            raise BadConfig("every_minutes must be >= 1")
        if self.fraction is not None and not 0 < self.fraction <= 1:
            raise BadConfig("fraction must be in (0, 1]")
        if not 0 <= self.exclude_before_hour < 24:
            raise BadConfig("exclude_before_hour must be in 0..23")

    def eligible(self) -> np.ndarray:
        if self.hour is not None:
            minutes = np.arange(60 * self.hour, 60 * self.hour + 60)
        else:
            minutes = np.arange(MINUTES)
        return minutes[minutes >= 60 * self.exclude_before_hour]

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        self.validate()
        elig = self.eligible()
        if self.every_minutes is not None:
            train = elig[(elig - elig[0]) % self.every_minutes == 0] if len(elig) else elig
        else:
            count = self.train_count
            if count is None:
                count = max(1, int(round(self.fraction * len(elig))))
            if count > len(elig):
                raise BadConfig(f"cannot draw {count} training minutes from {len(elig)}")
            rng = np.random.default_rng(self.seed)
            train = np.sort(rng.choice(elig, size=count, replace=False))
        if len(train) == 0:
            raise BadConfig("training split is empty")
        test = np.setdiff1d(elig, train)
        return train, test


def _solve_chunk(args) -> list[SensitivityRecord]:
    inst, thetas, minutes, with_jac = args
    return [
        build_record(inst, th, with_jacobian=with_jac, minute=int(m))
        for th, m in zip(thetas, minutes)
    ]


def solve_minutes(
    inst: MpqpInstance,
    thetas: np.ndarray,
    minutes,
    with_jacobian: bool = True,
    jobs: int = 1,
) -> list[SensitivityRecord]:
    """Build one record per minute; parallel chunks are gathered in input order."""
    minutes = [int(m) for m in minutes]
    rows = thetas[minutes]
    if jobs <= 1 or len(minutes) < 2 * jobs:
        return _solve_chunk((inst, rows, minutes, with_jacobian))
    chunks = np.array_split(np.arange(len(minutes)), jobs)
    tasks = [(inst, rows[c], [minutes[i] for i in c], with_jacobian) for c in chunks if len(c)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_solve_chunk, tasks))
    return [rec for part in parts for rec in part]


def summarize(records) -> dict:
    """Category counts over records; a record is constrained if any row is active."""
    total = len(records)
    constrained = sum(1 for r in records if r.active_set)
    return {
        "total": total,
        "unconstrained": total - constrained,
        "active_constrained": constrained,
        "degenerate": sum(1 for r in records if r.degenerate),
        "licq_violating": sum(1 for r in records if not r.licq_holds),
    }


@dataclass
class Dataset:
    train: list[SensitivityRecord]
    test: list[SensitivityRecord]
    summary: dict = field(default_factory=dict)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_records(self.train, directory / "train.jsonl")
        write_records(self.test, directory / "test.jsonl")
        with open(directory / "summary.json", "w") as fh:
            json.dump({"format_version": FORMAT_VERSION, **self.summary}, fh, indent=1, sort_keys=True)


def build_dataset(
    inst: MpqpInstance,
    profiles: DayProfiles,
    feeder: Feeder,
    gm: GridMatrices,
    spec: DatasetSpec,
    jobs: int = 1,
) -> Dataset:
    """Solve the selected minutes; only training records carry Jacobians.

    Raises :class:`InfeasibleOpf` naming the first infeasible minute.
    """
    profiles.check_feeder(feeder)
    train_min, test_min = spec.split()
    thetas = theta_matrix(profiles, gm)
    train = solve_minutes(inst, thetas, train_min, True, jobs)
    test = solve_minutes(inst, thetas, test_min, False, jobs)
    summary = summarize(train + test)
    summary["train"] = len(train)
    summary["test"] = len(test)
    log.info("dataset: %s", summary)
    return Dataset(train, test, summary)
