"""Command-line front end.

Subcommands: build-feeder, dataset, train, eval, bench. Every option may
also come from a JSON file passed with ``--config`` (keys are the long
option names with dashes or underscores); command-line flags win and
unknown keys are rejected.

Exit codes: 0 success, 2 usage or schema error, 3 invalid topology or
model, 4 infeasible OPF, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    BadConfig,
    DegenerateProfile,
    DimensionMismatch,
    EmptyBatch,
    FeederError,
    InfeasibleOpf,
    NonFiniteLoss,
    NonPositiveImpedance,
    NotATree,
    NotPositiveDefinite,
)
from .evaluation import (
    ExperimentSpec,
    format_table,
    fullday_configs,
    hourly_configs,
    run_experiment,
    test_mse,
    write_curves_csv,
    write_report_csv,
)
from .feeder import build_grid_matrices, load_feeder, save_feeder
from .mpqp import assemble_mpqp
from .networks import five_bus_feeder, ieee37_like_feeder
from .neural import NORMALIZE_CHOICES, PLAIN, SI, MlpModel, TrainConfig, TrainingSet, init_model, train
from .scenarios import (
    DatasetSpec,
    build_dataset,
    calibrate_profiles,
    generate_profiles,
    load_profiles_csv,
    solve_minutes,
    summarize,
    theta_matrix,
)
from .sensitivity import read_records

log = logging.getLogger("siopf")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_TOPOLOGY = 3
EXIT_INFEASIBLE = 4
EXIT_DIVERGED = 5
FORMAT_VERSION = 1

BUILTIN_FEEDERS = {"five-bus": five_bus_feeder, "ieee37-like": ieee37_like_feeder}

# Defaults live here rather than in argparse so that config-file values can
# fill options the user left unset.
DEFAULTS = {
    "build-feeder": {"builtin": None, "feeder": None, "out": None},
    "dataset": {
        "feeder": None, "builtin": None, "profiles": None, "synthetic": None,
        "hour": None, "every_minutes": None, "fraction": None, "train_count": None,
        "exclude_before_hour": 0, "split_seed": 0, "penetration": 0.75,
        "out": None, "jobs": None,
    },
    "train": {
        "dataset": None, "out": None, "curve": None, "mode": SI, "epochs": 1000,
        "learning_rate": 0.01, "jacobian_weight": 1.0, "hidden": "210,210,350",
        "seed": 0, "normalize": "none", "record_every": 1, "keep_best": True,
    },
    "eval": {"model": None, "dataset": None, "records": None, "report": None, "label": "eval"},
    "bench": {
        "feeder": None, "builtin": "ieee37-like", "profiles": None, "synthetic": 0,
        "penetration": 0.75, "hours": None, "train_size": 4, "fractions": None,
        "exclude_before_hour": 10, "runs": 10, "epochs": 1000, "seed": 0,
        "learning_rate": 0.01, "jacobian_weight": 1.0, "hidden": "210,210,350",
        "normalize": "none", "record_every": 1, "out": None, "jobs": None,
        "no_timing": False,
    },
}


class UsageError(Exception):
    pass


def _feeder_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--feeder", help="feeder JSON file")
    p.add_argument("--builtin", choices=sorted(BUILTIN_FEEDERS), help="use a built-in feeder instead of a file")


def _profile_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profiles", help="per-unit day profiles CSV (used as is)")
    p.add_argument("--synthetic", type=int, metavar="SEED", help="generate and calibrate a synthetic day with this seed")
    p.add_argument("--penetration", type=float, help="solar energy share of load energy for --synthetic (0.75)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siopf", description="Sensitivity-informed learning of inverter OPF dispatch.")
    parser.add_argument("--version", action="version", version=f"siopf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-feeder", help="validate a feeder and write its matrices")
    p.add_argument("feeder", nargs="?", help="feeder JSON file")
    p.add_argument("--builtin", choices=sorted(BUILTIN_FEEDERS), help="use a built-in feeder")
    p.add_argument("--out", help="output directory (feeder.json, matrices.json, report.json)")
    p.add_argument("--config", help="JSON file with option values")

    p = sub.add_parser("dataset", help="solve OPF minutes and write labeled train/test records")
    _feeder_args(p)
    _profile_args(p)
    p.add_argument("--hour", type=int, help="restrict to one hour of the day (0-23)")
    p.add_argument("--every-minutes", type=int, help="train on every k-th minute of the window")
    p.add_argument("--fraction", type=float, help="train on a random fraction of the window")
    p.add_argument("--train-count", type=int, help="train on this many random minutes")
    p.add_argument("--exclude-before-hour", type=int, help="drop minutes before this hour (0)")
    p.add_argument("--split-seed", type=int, help="seed for random train selection (0)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes (all cores)")
    p.add_argument("--config", help="JSON file with option values")

    p = sub.add_parser("train", help="train a plain or sensitivity-informed network")
    p.add_argument("--dataset", help="dataset directory (uses train.jsonl)")
    p.add_argument("--out", help="model JSON path")
    p.add_argument("--curve", help="loss-curve CSV path")
    p.add_argument("--mode", choices=[PLAIN, SI], help="loss (si)")
    p.add_argument("--epochs", type=int, help="(1000)")
    p.add_argument("--learning-rate", type=float, help="Adam step size (0.01)")
    p.add_argument("--jacobian-weight", type=float, help="weight of the Jacobian term (1.0)")
    p.add_argument("--hidden", help="comma-separated hidden widths (210,210,350)")
    p.add_argument("--seed", type=int, help="weight-initialization seed (0)")
    p.add_argument("--normalize", choices=list(NORMALIZE_CHOICES), help="input/output standardization (none)")
    p.add_argument("--record-every", type=int, help="curve thinning (1)")
    p.add_argument("--keep-best", action=argparse.BooleanOptionalAction, default=None,
                   help="return the lowest-training-loss parameters (on)")
    p.add_argument("--config", help="JSON file with option values")

    p = sub.add_parser("eval", help="test MSE of a model")
    p.add_argument("--model", help="model JSON")
    p.add_argument("--dataset", help="dataset directory (uses test.jsonl)")
    p.add_argument("--records", help="explicit JSONL records file instead of --dataset")
    p.add_argument("--report", help="append a report row to this CSV")
    p.add_argument("--label", help="experiment label for the report row")
    p.add_argument("--config", help="JSON file with option values")

    p = sub.add_parser("bench", help="paired plain vs sensitivity-informed Monte Carlo comparison")
    _feeder_args(p)
    _profile_args(p)
    p.add_argument("--hours", help="comma-separated hours for per-hour experiments")
    p.add_argument("--train-size", type=int, help="training scenarios per hour (4)")
    p.add_argument("--fractions", help="comma-separated full-day training fractions")
    p.add_argument("--exclude-before-hour", type=int, help="full-day experiments skip earlier minutes (10)")
    p.add_argument("--runs", type=int, help="Monte Carlo runs (10)")
    p.add_argument("--epochs", type=int, help="(1000)")
    p.add_argument("--seed", type=int, help="base seed for draws and initialization (0)")
    p.add_argument("--learning-rate", type=float, help="(0.01)")
    p.add_argument("--jacobian-weight", type=float, help="(1.0)")
    p.add_argument("--hidden", help="(210,210,350)")
    p.add_argument("--normalize", choices=list(NORMALIZE_CHOICES), help="(none)")
    p.add_argument("--record-every", type=int, help="curve thinning (1)")
    p.add_argument("--out", help="output directory (report.csv, curves.csv)")
    p.add_argument("--jobs", type=int, help="parallel runs (all cores)")
    p.add_argument("--no-timing", action="store_true", default=None,
                   help="leave the time column empty so reports are byte-reproducible")
    p.add_argument("--config", help="JSON file with option values")
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing precedence)."""
    opts = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        for key, value in cfg.items():
            norm = key.replace("-", "_")
            if norm not in opts:
                raise UsageError(f"unknown config key {key!r} for {command}")
            opts[norm] = value
    for key in opts:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    return opts


def _require(opts: dict, *keys: str) -> None:
    for key in keys:
        if opts.get(key) in (None, ""):
            raise UsageError(f"--{key.replace('_', '-')} is required")


def _int_list(text) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text) -> list[float]:
    if isinstance(text, list):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _jobs(value) -> int:
    return int(value) if value else (os.cpu_count() or 1)


def _load_feeder(opts: dict):
    if opts.get("builtin") and opts.get("feeder"):
        raise UsageError("give either --feeder or --builtin, not both")
    if opts.get("builtin"):
        if opts["builtin"] not in BUILTIN_FEEDERS:
            raise UsageError(f"unknown built-in feeder {opts['builtin']!r}")
        return BUILTIN_FEEDERS[opts["builtin"]]()
    if not opts.get("feeder"):
        raise UsageError("a feeder is required (--feeder or --builtin)")
    return load_feeder(opts["feeder"])


def _load_profiles(opts: dict, feeder):
    if (opts.get("profiles") is None) == (opts.get("synthetic") is None):
        raise UsageError("give exactly one of --profiles or --synthetic")
    if opts.get("profiles"):
        profiles = load_profiles_csv(opts["profiles"], feeder)
    else:
        from .scenarios import CalibrationConfig

        raw = generate_profiles(feeder, seed=int(opts["synthetic"]))
        profiles = calibrate_profiles(raw, feeder, CalibrationConfig(penetration=float(opts["penetration"])))
    profiles.check_feeder(feeder)
    return profiles


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"format_version": FORMAT_VERSION, **obj}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_build_feeder(opts: dict) -> int:
    _require(opts, "out")
    feeder = _load_feeder(opts)
    gm = build_grid_matrices(feeder)
    inst = assemble_mpqp(gm, feeder)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_feeder(feeder, out / "feeder.json")
    _write_json(out / "matrices.json", {
        "R": gm.R.tolist(), "X": gm.X.tolist(), "Fi": gm.Fi.tolist(), "Fl": gm.Fl.tolist(),
        "mpqp": inst.to_dict(),
    })
    eig_r = np.linalg.eigvalsh(gm.R)
    eig_x = np.linalg.eigvalsh(gm.X)
    report = {
        "name": feeder.name,
        "buses": feeder.bus_count,
        "lines": len(feeder.lines),
        "inverters": feeder.n_inverters,
        "loads": feeder.n_loads,
        "parameters": feeder.n_params,
        "constraints": inst.n_constraints,
        "min_eig_R": float(eig_r.min()),
        "min_eig_X": float(eig_x.min()),
        "positive_definite": bool(eig_r.min() > 0 and eig_x.min() > 0),
    }
    _write_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_dataset(opts: dict) -> int:
    _require(opts, "out")
    feeder = _load_feeder(opts)
    profiles = _load_profiles(opts, feeder)
    gm = build_grid_matrices(feeder)
    inst = assemble_mpqp(gm, feeder)
    spec = DatasetSpec(
        hour=opts["hour"],
        every_minutes=opts["every_minutes"],
        fraction=opts["fraction"],
        train_count=opts["train_count"],
        exclude_before_hour=int(opts["exclude_before_hour"]),
        seed=int(opts["split_seed"]),
    )
    data = build_dataset(inst, profiles, feeder, gm, spec, jobs=_jobs(opts["jobs"]))
    data.save(opts["out"])
    s = data.summary
    print(
        f"train {s['train']}  test {s['test']}  unconstrained {s['unconstrained']}  "
        f"active {s['active_constrained']}  degenerate {s['degenerate']}  licq_violating {s['licq_violating']}"
    )
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    _require(opts, "dataset", "out")
    records = read_records(Path(opts["dataset"]) / "train.jsonl")
    data = TrainingSet.from_records(records)
    hidden = _int_list(opts["hidden"])
    model = init_model([data.theta.shape[1], *hidden, data.x.shape[1]], seed=int(opts["seed"]))
    cfg = TrainConfig(
        mode=opts["mode"],
        jacobian_weight=float(opts["jacobian_weight"]),
        learning_rate=float(opts["learning_rate"]),
        epochs=int(opts["epochs"]),
        seed=int(opts["seed"]),
        normalize=opts["normalize"],
        record_every=int(opts["record_every"]),
        keep_best=bool(opts["keep_best"]),
    )
    model, hist = train(model, data, cfg)
    model.save(opts["out"])
    if opts.get("curve"):
        with open(opts["curve"], "w") as fh:
            fh.write("epoch,train_loss\n")
            for e, v in zip(hist.epochs, hist.train_loss):
                fh.write(f"{e},{v!r}\n")
    final = hist.train_loss[-1] if hist.train_loss else float("nan")
    print(f"mode {cfg.mode}  epochs {cfg.epochs}  final_loss {final:.6e}  train_time_s {hist.seconds:.3f}")
    return EXIT_OK


def cmd_eval(opts: dict) -> int:
    _require(opts, "model")
    if opts.get("records"):
        path = Path(opts["records"])
    elif opts.get("dataset"):
        path = Path(opts["dataset"]) / "test.jsonl"
    else:
        raise UsageError("--dataset or --records is required")
    model = MlpModel.load(opts["model"])
    records = read_records(path)
    mse = test_mse(model, records)
    print(f"{mse!r}")
    if opts.get("report"):
        report = Path(opts["report"])
        new = not report.exists()
        with open(report, "a") as fh:
            if new:
                fh.write("experiment,records,test_mse\n")
            fh.write(f"{opts['label']},{len(records)},{mse!r}\n")
    return EXIT_OK


def cmd_bench(opts: dict) -> int:
    _require(opts, "out")
    if (opts.get("hours") is None) == (opts.get("fractions") is None):
        raise UsageError("give exactly one of --hours or --fractions")
    feeder = _load_feeder(opts)
    profiles = _load_profiles(opts, feeder)
    gm = build_grid_matrices(feeder)
    inst = assemble_mpqp(gm, feeder)
    if opts["hours"] is not None:
        configs = hourly_configs(_int_list(opts["hours"]), int(opts["train_size"]))
    else:
        configs = fullday_configs(_float_list(opts["fractions"]), int(opts["exclude_before_hour"]))
    spec = ExperimentSpec(
        configs=configs,
        runs=int(opts["runs"]),
        epochs=int(opts["epochs"]),
        seed=int(opts["seed"]),
        hidden=_int_list(opts["hidden"]),
        learning_rate=float(opts["learning_rate"]),
        jacobian_weight=float(opts["jacobian_weight"]),
        normalize=opts["normalize"],
        record_every=int(opts["record_every"]),
        jobs=_jobs(opts["jobs"]),
    )
    spec.validate()
    minutes = sorted({m for c in configs for m in c.minutes})
    records = solve_minutes(inst, theta_matrix(profiles, gm), minutes, True, spec.jobs)
    log.info("bench records: %s", summarize(records))
    result = run_experiment(spec, records)
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(result.rows, out / "report.csv", include_time=not opts["no_timing"])
    write_curves_csv(result.curves, out / "curves.csv")
    print(format_table(result.rows))
    return EXIT_OK


COMMANDS = {
    "build-feeder": cmd_build_feeder,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        opts = resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except (NotATree, NonPositiveImpedance, NotPositiveDefinite) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOPOLOGY
    except InfeasibleOpf as exc:
        print(f"error: {exc} (minute {exc.minute})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, FeederError, BadConfig, DimensionMismatch, EmptyBatch, DegenerateProfile,
            KeyError, TypeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
