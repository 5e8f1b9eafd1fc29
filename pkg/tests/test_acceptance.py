"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N ...: PASS|FAIL`` line with the
measured quantities (visible in ``pytest -v`` output) and then asserts.
"""

import time

import numpy as np
import pytest

from conftest import LICQ_THETA
from oracles import qp_dual_pg, random_feeder
from siopf.evaluation import MSE_DISPLAY_UNIT, ExperimentSpec, fullday_configs, hourly_configs, run_experiment
from siopf.feeder import build_grid_matrices
from siopf.mpqp import assemble_mpqp, constraint_labels, solve_qp
from siopf.neural import PLAIN, SI, TrainConfig, TrainingSet, init_model, loss, loss_gradient
from siopf.scenarios import DatasetSpec, build_dataset, solve_minutes, summarize
from siopf.sensitivity import critical_region, fd_jacobian, jacobian, partition_constraints

TABLE_HOURS = [5, 12, 16, 20]


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def _rel_fro(a, b):
    return float(np.linalg.norm(a - b) / (1.0 + np.linalg.norm(b)))


def _affinity_errors(inst, theta, support, rng, count):
    """Max-norm deviations from the affine law for random in-region steps."""
    part = partition_constraints(inst, solve_qp(inst, theta))
    region = critical_region(inst, part)
    x0 = solve_qp(inst, theta).x
    errs = []
    for _ in range(count):
        d = np.where(support, rng.normal(size=theta.size), 0.0)
        d *= 1e-3 * (1.0 + np.abs(theta).max()) / np.abs(d).max()
        while not region.contains(theta + d):
            d *= 0.5
        x = solve_qp(inst, theta + d, warm_start=list(part.active)).x
        errs.append(float(np.abs(x - x0 - region.J @ d).max()))
    return errs


def test_criterion_1_jacobian_matches_finite_differences(ieee37, synthetic_day, verdict):
    inst = ieee37.inst
    cases = [r for r in synthetic_day.records if r.active_set and not r.degenerate]
    tick = time.perf_counter()
    errs = []
    for rec in cases:
        part = partition_constraints(inst, solve_qp(inst, rec.theta, warm_start=rec.active_set))
        J, _ = jacobian(inst, part)
        errs.append(_rel_fro(J, fd_jacobian(inst, part, warm_start=rec.active_set)))
    seconds = time.perf_counter() - tick
    ok = len(cases) >= 200 and max(errs) <= 1e-6 and seconds <= 60
    verdict(1, "sensitivity exactness", ok,
            f"{len(cases)} constrained scenarios, max rel Frobenius error {max(errs):.2e}, {seconds:.1f} s")
    assert ok


def test_criterion_2_local_affinity(ieee37, synthetic_day, verdict):
    inst, f = ieee37.inst, ieee37.feeder
    rng = np.random.default_rng(20)
    constrained = [r for r in synthetic_day.records if r.active_set and not r.degenerate]
    bases = constrained[:: len(constrained) // 10][:10]
    bases += [r for r in constrained if not r.licq_holds][:2]
    errs = []
    for rec in bases:
        errs += _affinity_errors(inst, rec.theta, f.parameter_support(), rng, 100)
    ok = max(errs) <= 1e-8
    verdict(2, "local affinity", ok, f"{len(bases)} bases x 100 steps, max inf-norm deviation {max(errs):.2e}")
    assert ok


def test_criterion_3_licq_violation_reproduced(five_bus, verdict):
    inst, f = five_bus.inst, five_bus.feeder
    part = partition_constraints(inst, solve_qp(inst, LICQ_THETA))
    labels = [constraint_labels(f)[j] for j in part.active]
    rank = int(np.linalg.matrix_rank(part.C_act))
    J, licq = jacobian(inst, part)
    fd_err = _rel_fro(J, fd_jacobian(inst, part))
    aff = max(_affinity_errors(inst, LICQ_THETA, f.parameter_support(), np.random.default_rng(3), 100))
    ok = labels == ["vmin@3", "vmin@4"] and rank == 1 and not licq and fd_err <= 1e-6 and aff <= 1e-8
    verdict(3, "LICQ violation", ok,
            f"active {labels}, rank {rank}, FD error {fd_err:.2e}, affinity deviation {aff:.2e}")
    assert ok


def test_criterion_4_kkt_and_oracle_agreement(ieee37, synthetic_day, verdict):
    worst_kkt = 0.0
    for theta in synthetic_day.thetas:
        sol = solve_qp(ieee37.inst, theta)
        assert sol.ok
        worst_kkt = max(worst_kkt, sol.kkt_residual)
    gaps = []
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        fdr = random_feeder(5, 3, 3, rng)
        inst = assemble_mpqp(build_grid_matrices(fdr), fdr)
        theta = rng.normal(size=inst.n_theta) * 2.0
        sol = solve_qp(inst, theta)
        while not sol.ok:
            theta *= 0.7
            sol = solve_qp(inst, theta)
        worst_kkt = max(worst_kkt, sol.kkt_residual)
        _, obj = qp_dual_pg(inst.A, inst.B, inst.C, inst.D, inst.e, theta)
        gaps.append(abs(inst.objective(sol.x, theta) - obj))
    ok = worst_kkt <= 1e-8 and max(gaps) <= 1e-6
    verdict(4, "KKT correctness", ok,
            f"1440 day minutes + 50 random instances, max KKT residual {worst_kkt:.2e}, "
            f"max oracle objective gap {max(gaps):.2e}")
    assert ok


def _hourly_records(ieee37, synthetic_day):
    return [synthetic_day.records[m] for h in TABLE_HOURS for m in range(60 * h, 60 * h + 60)]


@pytest.fixture(scope="module")
def hourly_result(ieee37, synthetic_day):
    spec = ExperimentSpec(hourly_configs(TABLE_HOURS, 4), runs=5, epochs=1000, seed=0,
                          record_every=1000, jobs=1)
    tick = time.perf_counter()
    result = run_experiment(spec, _hourly_records(ieee37, synthetic_day))
    return result, time.perf_counter() - tick


@pytest.mark.slow
def test_criterion_5_si_beats_plain_per_hour(hourly_result, verdict):
    result, seconds = hourly_result
    lines, factors, every_run = [], [], True
    for h in TABLE_HOURS:
        p = np.array(result.row(f"hour{h:02d}", PLAIN).run_mse)
        s = np.array(result.row(f"hour{h:02d}", SI).run_mse)
        wins = int(np.sum(s < p))
        every_run &= wins == len(p) == 5
        factor = p.mean() / s.mean()
        factors.append(factor)
        lines.append(f"h{h} plain {p.mean() / MSE_DISPLAY_UNIT:.4g} si {s.mean() / MSE_DISPLAY_UNIT:.4g} "
                     f"wins {wins}/5 x{factor:.3g}")
    median = float(np.median(factors))
    ok = every_run and median >= 10 and seconds <= 900
    verdict(5, "SI vs plain", ok, "MSE in 1e-6 pu^2: " + "; ".join(lines) + f"; median factor {median:.3g}; {seconds:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_6_training_time_ratio(ieee37, synthetic_day, hourly_result, verdict):
    spec = ExperimentSpec(fullday_configs([0.05]), runs=2, epochs=1000, seed=0, record_every=1000, jobs=1)
    records = solve_minutes(ieee37.inst, synthetic_day.thetas, spec.configs[0].minutes, True)
    result = run_experiment(spec, records)
    plain = result.row("fullday5pct", PLAIN).mean_train_time_s
    si = result.row("fullday5pct", SI).mean_train_time_s
    ratio = si / plain
    hourly, _ = hourly_result
    hourly_ratio = np.mean([hourly.row(f"hour{h:02d}", SI).mean_train_time_s
                            / hourly.row(f"hour{h:02d}", PLAIN).mean_train_time_s for h in TABLE_HOURS])
    ok = ratio <= 2.0
    verdict(6, "training overhead", ok,
            f"full day 5% ({spec.configs[0].train_size} samples): plain {plain:.2f} s, si {si:.2f} s, "
            f"ratio {ratio:.2f}; hourly (4 samples) mean ratio {hourly_ratio:.2f}")
    assert ok


def test_criterion_7_gradient_integrity(verdict):
    worst = 0.0
    h = 1e-6
    for seed in range(10):
        rng = np.random.default_rng(700 + seed)
        dims = [int(rng.integers(2, 6)), int(rng.integers(3, 9)), int(rng.integers(3, 9)), int(rng.integers(1, 5))]
        model = init_model(dims, seed=seed)
        model.biases = [0.1 * rng.normal(size=b.shape) for b in model.biases]
        S = int(rng.integers(1, 6))
        batch = TrainingSet(rng.normal(size=(S, dims[0])), rng.normal(size=(S, dims[-1])),
                            rng.normal(size=(S, dims[-1], dims[0])), rng.random(S) < 0.8)
        for mode in (PLAIN, SI):
            cfg = TrainConfig(mode=mode, jacobian_weight=float(rng.uniform(0.1, 2.0)))
            gW, gb = loss_gradient(model, batch, cfg)
            exact, fd = [], []
            for params, grads in ((model.weights, gW), (model.biases, gb)):
                for P, G in zip(params, grads):
                    for idx in np.ndindex(P.shape):
                        old = P[idx]
                        P[idx] = old + h
                        up = loss(model, batch, cfg)
                        P[idx] = old - h
                        down = loss(model, batch, cfg)
                        P[idx] = old
                        exact.append(G[idx])
                        fd.append((up - down) / (2 * h))
            exact, fd = np.array(exact), np.array(fd)
            worst = max(worst, float(np.linalg.norm(exact - fd) / np.linalg.norm(fd)))
    ok = worst <= 1e-5
    verdict(7, "gradient integrity", ok, f"10 model/batch pairs x 2 modes, max relative error {worst:.2e}")
    assert ok


def test_criterion_8_degeneracy_accounting(ieee37, synthetic_day, verdict):
    spec = DatasetSpec(fraction=0.05, seed=8)
    data = build_dataset(ieee37.inst, synthetic_day.profiles, ieee37.feeder, ieee37.gm, spec)
    s = data.summary
    recount = summarize(data.train + data.test)
    consistent = (
        all(s[k] == recount[k] for k in recount)
        and s["unconstrained"] + s["active_constrained"] == s["total"] == 1440
        and s["train"] + s["test"] == 1440
    )
    ok = consistent and s["unconstrained"] > 0 and s["active_constrained"] > 0 and s["licq_violating"] > 0
    verdict(8, "degeneracy accounting", ok,
            f"band {ieee37.feeder.voltage_band} pu: unconstrained {s['unconstrained']}, active {s['active_constrained']}, "
            f"LICQ-violating {s['licq_violating']}, degenerate {s['degenerate']}, recount consistent {consistent}")
    assert ok
