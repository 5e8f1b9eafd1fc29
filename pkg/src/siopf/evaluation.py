"""Paired plain vs sensitivity-informed training over Monte Carlo training draws."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, EmptyBatch, NonFiniteLoss
from .neural import PLAIN, SI, MlpModel, TrainConfig, TrainingSet, init_model, train, value_mse
from .sensitivity import SensitivityRecord

log = logging.getLogger(__name__)

MSE_DISPLAY_UNIT = 1e-6


def test_mse(model: MlpModel, test_set) -> float:
    """Mean squared prediction error norm over the test samples, in pu^2."""
    if isinstance(test_set, list):
        if not test_set:
            raise EmptyBatch("test set is empty")
        theta = np.array([r.theta for r in test_set])
        x = np.array([r.x for r in test_set])
    else:
        if len(test_set) == 0:
            raise EmptyBatch("test set is empty")
        theta, x = test_set.theta, test_set.x
    return value_mse(model, theta, x)


test_mse.__test__ = False  # not a pytest test


@dataclass
class SplitConfig:
    """One table row group: the eligible minutes and how many to train on."""

    label: str
    minutes: list[int]
    train_size: int


def hourly_configs(hours, train_size: int = 4) -> list[SplitConfig]:
    return [SplitConfig(f"hour{h:02d}", list(range(60 * h, 60 * h + 60)), train_size) for h in hours]


def fullday_configs(fractions, exclude_before_hour: int = 10) -> list[SplitConfig]:
    minutes = list(range(60 * exclude_before_hour, 1440))
    return [
        SplitConfig(f"fullday{round(100 * f)}pct", minutes, max(1, int(round(f * len(minutes)))))
        for f in fractions
    ]


@dataclass
class ExperimentSpec:
    configs: list[SplitConfig]
    modes: list[str] = field(default_factory=lambda: [PLAIN, SI])
    runs: int = 10
    epochs: int = 1000
    seed: int = 0
    hidden: list[int] = field(default_factory=lambda: [210, 210, 350])
    learning_rate: float = 0.01
    jacobian_weight: float = 1.0
    normalize: str = "none"
    record_every: int = 1
    jobs: int = 1

    def validate(self) -> None:
        if self.runs < 1:
            raise BadConfig("runs must be >= 1")
        if not self.modes or any(m not in (PLAIN, SI) for m in self.modes):
            raise BadConfig(f"modes must be a non-empty subset of {PLAIN!r}, {SI!r}")
        if not self.configs:
            raise BadConfig("no experiment configurations")
        for c in self.configs:
            if not 1 <= c.train_size <= len(c.minutes):
                raise BadConfig(f"{c.label}: train_size {c.train_size} out of range")


@dataclass
class ReportRow:
    experiment: str
    mode: str
    runs: int
    train_size: int
    epochs: int
    mean_test_mse: float
    mean_train_time_s: float
    run_mse: list[float] = field(default_factory=list)
    run_time_s: list[float] = field(default_factory=list)
    failed_runs: int = 0


@dataclass
class Curve:
    experiment: str
    mode: str
    run: int
    epochs: list[int]
    train_loss: list[float]
    test_mse: list[float]


@dataclass
class ExperimentResult:
    rows: list[ReportRow]
    curves: list[Curve]

    def row(self, experiment: str, mode: str) -> ReportRow:
        for r in self.rows:
            if r.experiment == experiment and r.mode == mode:
                return r
        raise KeyError((experiment, mode))


def _run_seed(seed: int, config_index: int, run: int) -> int:
    return int(np.random.SeedSequence([seed, config_index, run]).generate_state(1)[0])


def _one_run(args):
    spec, ci, run, pool_train, pool_test = args
    config = spec.configs[ci]
    run_seed = _run_seed(spec.seed, ci, run)
    n_in = pool_train.theta.shape[1]
    n_out = pool_train.x.shape[1]
    init = init_model([n_in, *spec.hidden, n_out], seed=run_seed)
    out = []
    for mode in spec.modes:
        cfg = TrainConfig(
            mode=mode,
            jacobian_weight=spec.jacobian_weight,
            learning_rate=spec.learning_rate,
            epochs=spec.epochs,
            seed=run_seed,
            normalize=spec.normalize,
            record_every=spec.record_every,
        )
        try:
            model, hist = train(init, pool_train, cfg, validation=pool_test)
        except NonFiniteLoss as exc:
            log.warning("%s/%s run %d diverged at epoch %d", config.label, mode, run, exc.epoch)
            out.append((mode, np.nan, np.nan, None))
            continue
        mse = value_mse(model, pool_test.theta, pool_test.x)
        curve = Curve(config.label, mode, run, hist.epochs, hist.train_loss, hist.val_mse)
        out.append((mode, mse, hist.seconds, curve))
    return ci, run, out


def draw_split(spec: ExperimentSpec, ci: int, run: int) -> tuple[np.ndarray, np.ndarray]:
    """Training and test minutes for one Monte Carlo run (sampling without replacement)."""
    config = spec.configs[ci]
    rng = np.random.default_rng([spec.seed, ci, run, 7])
    minutes = np.asarray(config.minutes)
    train_min = np.sort(rng.choice(minutes, size=config.train_size, replace=False))
    return train_min, np.setdiff1d(minutes, train_min)


def run_experiment(spec: ExperimentSpec, records: list[SensitivityRecord]) -> ExperimentResult:
    """Train every mode on identical draws and initial weights; aggregate test MSE and time.

    ``records`` must cover every minute referenced by the configurations
    (records are matched by their ``minute`` field).
    """
    spec.validate()
    by_minute = {r.minute: r for r in records}
    tasks = []
    for ci, config in enumerate(spec.configs):
        missing = [m for m in config.minutes if m not in by_minute]
        if missing:
            raise BadConfig(f"{config.label}: no records for minutes {missing[:5]}...")
        for run in range(spec.runs):
            train_min, test_min = draw_split(spec, ci, run)
            tr = TrainingSet.from_records([by_minute[m] for m in train_min])
            te = TrainingSet.from_records([by_minute[m] for m in test_min]) if len(test_min) else tr
            tasks.append((spec, ci, run, tr, te))

    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            results = list(pool.map(_one_run, tasks))
    else:
        results = [_one_run(t) for t in tasks]

    rows = []
    curves = []
    for ci, config in enumerate(spec.configs):
        for mode in spec.modes:
            mses, times, failed = [], [], 0
            for rci, run, out in results:
                if rci != ci:
                    continue
                for m, mse, secs, curve in out:
                    if m != mode:
                        continue
                    if curve is None:
                        failed += 1
                        continue
                    mses.append(mse)
                    times.append(secs)
                    curves.append(curve)
            rows.append(
                ReportRow(
                    experiment=config.label,
                    mode=mode,
                    runs=len(mses),
                    train_size=config.train_size,
                    epochs=spec.epochs,
                    mean_test_mse=float(np.mean(mses)) if mses else float("nan"),
                    mean_train_time_s=float(np.mean(times)) if times else float("nan"),
                    run_mse=mses,
                    run_time_s=times,
                    failed_runs=failed,
                )
            )
    return ExperimentResult(rows, curves)


REPORT_COLUMNS = ["experiment", "mode", "runs", "train_size", "epochs", "mean_test_mse", "mean_train_time_s"]


def write_report_csv(rows: list[ReportRow], path: str | Path, include_time: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow(
                [r.experiment, r.mode, r.runs, r.train_size, r.epochs, repr(r.mean_test_mse),
                 repr(r.mean_train_time_s) if include_time else ""]
            )


def write_curves_csv(curves: list[Curve], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "mode", "run", "epoch", "train_loss", "test_mse"])
        for c in curves:
            for k, epoch in enumerate(c.epochs):
                test = repr(c.test_mse[k]) if k < len(c.test_mse) else ""
                w.writerow([c.experiment, c.mode, c.run, epoch, repr(c.train_loss[k]), test])


def format_table(rows: list[ReportRow]) -> str:
    """Text table with MSE in units of 1e-6 pu^2 and time in seconds."""
    lines = [f"{'experiment':<16}{'mode':<7}{'runs':>5}{'train':>7}{'MSE[1e-6]':>14}{'time[s]':>10}"]
    for r in rows:
        lines.append(
            f"{r.experiment:<16}{r.mode:<7}{r.runs:>5}{r.train_size:>7}"
            f"{r.mean_test_mse / MSE_DISPLAY_UNIT:>14.4f}{r.mean_train_time_s:>10.2f}"
        )
    return "\n".join(lines)
