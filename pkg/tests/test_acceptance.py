"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed as the test
runs (visible with ``-s``) and again as a block at the end of the module.
Run alone with ``pytest tests/test_acceptance.py -s``. The full module takes
about twenty minutes on one core.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from dyncs import harness
from dyncs.baseline import BPConfig, basis_pursuit_denoise, bp_lambda, bp_sequence
from dyncs.harness import ExperimentSpec, simulate_cell, time_averaged_error
from dyncs.model import make_innovations, propagate_states
from dyncs.sensing import build_ensemble, observe, row_counts_for_ratio, scale_to_snr
from dyncs.smoother import InnerSSMSpec, fixed_interval_smooth, joint_map_oracle
from dyncs.solver import SolverConfig, run
from dyncs.spikes import detect_spikes

SEEDS = tuple(range(1, 21))

# Full-size runs: few outer passes, two inner passes. The objective is
# flat after a handful of reweightings at this size.
FULL_SOLVER = SolverConfig(eps_smooth=1e-10, outer_iters=5, inner_iters=2, startup_iters=2)
SPIKE_SOLVER = SolverConfig(eps_smooth=1e-10, outer_iters=10, inner_iters=2, startup_iters=2)
# Bands are computed with a moderate smoothing constant; see the ledger.
BAND_SOLVER = SolverConfig(eps_smooth=0.1, outer_iters=5, inner_iters=2, startup_iters=2)

# Frozen from the reference runs: median error ratio was about 0.57.
RATIO_MAX = 0.7
THETA_TOL = 0.05
RECALL_MIN = 0.8

_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    _LINES.append(line)
    print(line)


@pytest.fixture(scope="module", autouse=True)
def summary(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    if tr is not None and _LINES:
        tr.write_line("")
        tr.write_line("acceptance summary")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            tr.write_line(line)


def full_spec(**kw) -> ExperimentSpec:
    base = dict(seeds=SEEDS, snr_db=(5.0,), compression=(0.5,), p=200, T=200,
                s_first=8, s_rest=4, theta=0.95, sigma2=1.0, solver=FULL_SOLVER)
    base.update(kw)
    return ExperimentSpec(**base)


@pytest.fixture(scope="module")
def reference_runs():
    """The 20 seeded runs at 5 dB and compression 0.5, with their baselines."""
    spec = full_spec()
    out = []
    for seed in SEEDS:
        cell = simulate_cell(spec, seed, 5.0, 0.5)
        ens = cell.ensemble
        t0 = time.perf_counter()
        res = run(cell.observations, ens, spec.solver, cell.schedule, cell.sigma2)
        secs = time.perf_counter() - t0
        lams = [bp_lambda(np.sqrt(cell.sigma2), cell.schedule[t], ens.row_counts[t], ens.p)
                for t in range(ens.T)]
        xb = bp_sequence(ens, cell.observations, lams)
        out.append(dict(
            seed=seed, result=res, seconds=secs,
            err=time_averaged_error(cell.trajectory.states, res.states),
            err_bp=time_averaged_error(cell.trajectory.states, xb),
        ))
    return out


def test_criterion_1_smoother_matches_oracle():
    rng = np.random.default_rng(20240101)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(50):
        p = int(rng.integers(1, 9))
        T = int(rng.integers(1, 6))
        rows = rng.integers(1, p + 4, size=T)
        rows[0] = rows.max()
        ens = build_ensemble(p, rows, seed=int(rng.integers(1 << 31)))
        spec = InnerSSMSpec(rng.uniform(-0.99, 0.99), np.exp(rng.uniform(-8, 2, (T, p))),
                            np.exp(rng.uniform(-3, 1, T)), ens)
        obs = [rng.standard_normal(n) for n in rows]
        sm = fixed_interval_smooth(spec, obs)
        means, covs, lag = joint_map_oracle(spec, obs)
        for a, b in ((sm.means, means), (sm.covs, covs), (sm.lag_one, lag)):
            scale = np.abs(b).max()
            if scale > 0:
                worst = max(worst, np.abs(a - b).max() / scale)
    secs = time.perf_counter() - t0
    ok = worst <= 1e-8 and secs < 10
    report(1, "smoother-oracle equivalence", ok,
           f"max relative error {worst:.2e} (<= 1e-8), {secs:.2f} s (< 10 s)")
    assert ok


def test_criterion_2_surrogate_monotone(reference_runs):
    worst = 0.0
    for r in reference_runs:
        f = np.asarray(r["result"].objective_trace)
        scale = max(abs(f[0]), 1.0)
        worst = max(worst, float(np.max(np.diff(f), initial=-np.inf)) / scale)
    secs = sum(r["seconds"] for r in reference_runs)
    ok = worst <= 1e-9 and secs < 300
    report(2, "surrogate monotonicity", ok,
           f"largest relative increase {worst:.2e} (<= 1e-9), solver time {secs:.0f} s (< 300 s)")
    assert ok


def test_criterion_3_beats_basis_pursuit(reference_runs):
    wins = sum(r["err"] < r["err_bp"] for r in reference_runs)
    ratio = float(np.median([r["err"] / r["err_bp"] for r in reference_runs]))
    ok = wins >= 18 and ratio <= RATIO_MAX
    report(3, "baseline dominance", ok,
           f"wins {wins}/20 (>= 18), median error ratio {ratio:.3f} (<= {RATIO_MAX})")
    assert ok


def test_criterion_4_stability_bound():
    t0 = time.perf_counter()
    held, margin = 0, np.inf
    for k in range(100):
        r = harness.bound_trial(40, 10, 2, [8000] * 10, 0.95, 1e-4, seed=k)
        held += r["bound_holds"]
        margin = min(margin, r["bound"] / r["l2_error"])
    secs = time.perf_counter() - t0
    ok = held == 100 and secs < 120
    report(4, "stability bound", ok,
           f"held {held}/100, smallest bound/error {margin:.3g}, {secs:.0f} s (< 120 s)")
    assert ok


def test_criterion_5_theta_recovery():
    spec = full_spec(snr_db=(20.0,))
    thetas = []
    for seed in SEEDS:
        cell = simulate_cell(spec, seed, 20.0, 0.5)
        res = run(cell.observations, cell.ensemble, spec.solver, cell.schedule, cell.sigma2)
        thetas.append(res.theta)
    thetas = np.array(thetas)
    good = int(np.sum(np.abs(thetas - 0.95) <= THETA_TOL))
    ok = good >= 18
    report(5, "theta recovery", ok,
           f"{good}/20 within {THETA_TOL} (>= 18), theta_hat range "
           f"[{thetas.min():.4f}, {thetas.max():.4f}]")
    assert ok


def test_criterion_6_compression_075_recall():
    # ground truth scaled once to 5 dB against the uncompressed ensemble
    spec = full_spec(compression=(0.75,), snr_reference="full", solver=SPIKE_SOLVER)
    hits = total = 0
    for seed in SEEDS:
        cell = simulate_cell(spec, seed, 5.0, 0.75)
        res = run(cell.observations, cell.ensemble, spec.solver, cell.schedule, cell.sigma2)
        lo, hi = res.bands(0.90)
        det = detect_spikes(res.states, lo, hi, res.theta).as_mask(res.states.shape)
        w = cell.trajectory.innovations
        thr = np.quantile(w[w != 0], 0.75)
        for t, j in zip(*np.nonzero(w >= thr)):
            hits += bool(det[max(t - 1, 0):t + 2, j].any())
            total += 1
    recall = hits / total
    ok = recall >= RECALL_MIN
    report(6, "compression 0.75 recall", ok,
           f"top-quartile recall {recall:.3f} over {total} spikes (>= {RECALL_MIN})")
    assert ok


def test_criterion_7_band_coverage():
    spec = full_spec(seeds=tuple(range(1, 51)), solver=BAND_SOLVER)
    cover = []
    for seed in spec.seeds:
        cell = simulate_cell(spec, seed, 5.0, 0.5)
        res = run(cell.observations, cell.ensemble, spec.solver, cell.schedule, cell.sigma2)
        lo, hi = res.bands(0.90)
        x = cell.trajectory.states
        cover.append(np.mean((x >= lo) & (x <= hi)))
    c = float(np.mean(cover))
    ok = 0.85 <= c <= 0.97
    report(7, "90% band coverage", ok, f"mean coverage {c:.3f} over 50 trials (in [0.85, 0.97])")
    assert ok


def _timed_solve(T: int, seed: int) -> float:
    p = 100
    sched = np.full(T, 4)
    sched[0] = 8
    rows = row_counts_for_ratio(sched, p, 0.5)
    traj = propagate_states(0.95, make_innovations(p, sched, seed=seed))
    ens = build_ensemble(p, rows, seed=seed + 1)
    traj = scale_to_snr(ens, traj, 1.0, 5.0)
    obs = observe(ens, traj, 1.0, seed=seed + 2)
    cfg = SolverConfig(theta_init=0.95, estimate_theta=False, outer_iters=3, inner_iters=2,
                       tol_objective=1e-300, tol_state=1e-300)
    t0 = time.perf_counter()
    res = run(obs, ens, cfg, sched, 1.0)
    secs = time.perf_counter() - t0
    assert res.iterations == 3
    return secs


def test_criterion_8_linear_in_T():
    # Pairs are interleaved so that drift in machine load hits both lengths.
    _timed_solve(200, 0)  # warm-up
    ratios = []
    for k in range(5):
        short = _timed_solve(200, k)
        ratios.append(_timed_solve(400, k) / short)
    ratio = float(np.median(ratios))
    ok = 1.7 <= ratio <= 2.3
    report(8, "linear-in-T scaling", ok,
           f"median time ratio T=400/T=200 {ratio:.3f} (in [1.7, 2.3])")
    assert ok


def test_criterion_9_static_reduction():
    worst = 0.0
    sigma2 = 0.05
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(10, 40))
        n = int(rng.integers(p // 2, p))
        s = int(rng.integers(1, 4))
        ens = build_ensemble(p, [n], seed=seed)
        x = np.zeros(p)
        x[rng.choice(p, s, replace=False)] = 3 * rng.standard_normal(s)
        y = [ens.A(0) @ x + np.sqrt(sigma2) * rng.standard_normal(n)]
        cfg = SolverConfig(theta_init=0.0, estimate_theta=False, outer_iters=5000,
                           tol_objective=1e-15, tol_state=1e-13)
        res = run(y, ens, cfg, [s], sigma2)
        # same problem in lasso form: lam n sigma2_t / sqrt(s), sigma2_t = sigma2 / n
        lam_bp = res.lam * sigma2 / np.sqrt(s)
        bp = basis_pursuit_denoise(ens.A(0), y[0], lam_bp,
                                   BPConfig(max_iter=200000, tol=1e-16, kkt_tol=1e-10))
        worst = max(worst, np.linalg.norm(res.states[0] - bp.x) / np.linalg.norm(bp.x))
    ok = worst <= 1e-4
    report(9, "static reduction", ok, f"max relative difference {worst:.2e} (<= 1e-4)")
    assert ok
