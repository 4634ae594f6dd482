"""Experiment plumbing: simulation grids, trace ingestion, metrics and file I/O.

File layouts
------------
trace CSV
    Header ``coord_0,...,coord_{p-1}``, then one row per time sample.
raster CSV
    Columns ``coordinate,time_index,amplitude``, one row per detected spike.
metrics CSV
    One row per (seed, grid cell) with the columns of `METRIC_FIELDS`.
observations CSV
    Columns ``time_index,row_index,value``; ragged per-time vectors in long form.
ensemble
    Binary container written by `dyncs.sensing.save_ensemble`.

Floats are written with 17 significant digits, which round-trips float64
exactly, so reruns with the same seeds produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from dyncs.baseline import BPConfig, bp_lambda, bp_sequence
from dyncs.model import (
    StateTrajectory,
    best_s_term,
    innovation_sequence,
    make_innovations,
    propagate_states,
    theorem_bound,
)
from dyncs.sensing import (
    MeasurementEnsemble,
    build_ensemble,
    certify_rip,
    empirical_snr_db,
    load_ensemble,
    observe,
    row_counts_for_ratio,
    save_ensemble,
    scale_to_snr,
)
from dyncs.solver import DeconvolutionResult, SolverConfig, run
from dyncs.spikes import SpikeTrain, detect_spikes

WORKERS_ENV = "DYNCS_WORKERS"
FLOAT_FMT = "%.17g"
METRIC_FIELDS = (
    "seed", "snr_db", "compression", "method", "l2_error", "relative_mse",
    "precision", "recall", "f1", "bound", "bound_holds", "theta_hat",
    "iterations", "seconds",
)


def worker_count(default: int = 1) -> int:
    """Worker processes from the ``DYNCS_WORKERS`` environment variable."""
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# ---------------------------------------------------------------------------
# experiment specification


@dataclass(frozen=True)
class ExperimentSpec:
    """A grid of simulation cells.

    `compression` lists levels ``1 - n/p``; row counts follow
    `row_counts_for_ratio` with ratio ``1 - compression``. `snr_reference`
    chooses where the SNR target is met: ``"cell"`` scales the signal in
    every cell separately, ``"full"`` scales it once against an
    uncompressed ensemble and reuses the same ground truth at every
    compression level, so that a compression sweep compares the same
    signal measured with fewer rows.
    """

    seeds: tuple = (0,)
    snr_db: tuple = (5.0,)
    compression: tuple = (0.0, 0.25, 0.5, 0.75)
    p: int = 200
    T: int = 200
    s_first: int = 8
    s_rest: int = 4
    theta: float = 0.95
    sigma2: float = 1.0
    amplitude: str = "positive"
    snr_reference: str = "cell"
    solver: SolverConfig = field(default_factory=SolverConfig)
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "snr_db", tuple(float(s) for s in self.snr_db))
        object.__setattr__(self, "compression", tuple(float(c) for c in self.compression))
        if not self.seeds or not self.snr_db or not self.compression:
            raise ValueError("the experiment grid must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(not 0 <= c < 1 for c in self.compression):
            raise ValueError("compression levels must lie in [0, 1)")
        if not 1 <= self.s_rest <= self.s_first <= self.p:
            raise ValueError("need 1 <= s_rest <= s_first <= p")
        if self.T < 1 or not abs(self.theta) < 1 or self.sigma2 <= 0:
            raise ValueError("need T >= 1, |theta| < 1 and sigma2 > 0")
        if self.snr_reference not in ("cell", "full"):
            raise ValueError("snr_reference must be 'cell' or 'full'")

    @property
    def schedule(self) -> np.ndarray:
        s = np.full(self.T, self.s_rest, dtype=int)
        s[0] = self.s_first
        return s

    def cells(self) -> list[tuple[int, float, float]]:
        return [(seed, snr, c) for seed in self.seeds for snr in self.snr_db
                for c in self.compression]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"], d["snr_db"], d["compression"] = (
            list(self.seeds), list(self.snr_db), list(self.compression))
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        data = dict(data)
        if "solver" in data and isinstance(data["solver"], dict):
            data["solver"] = SolverConfig.from_dict(data["solver"])
        return cls(**data)


def load_json(path: str | Path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def load_solver_config(path: str | Path) -> SolverConfig:
    """Solver settings from a JSON object whose keys are `SolverConfig` fields."""
    return SolverConfig.from_dict(load_json(path))


# ---------------------------------------------------------------------------
# simulation


@dataclass
class SimulatedCell:
    seed: int
    snr_db: float
    compression: float
    trajectory: StateTrajectory
    ensemble: MeasurementEnsemble
    observations: list
    schedule: np.ndarray
    sigma2: float

    @property
    def name(self) -> str:
        return cell_name(self.seed, self.snr_db, self.compression)


def cell_name(seed: int, snr_db: float, compression: float) -> str:
    return f"seed{seed}_snr{snr_db:g}_comp{compression:g}"


def _child_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def simulate_cell(spec: ExperimentSpec, seed: int, snr_db: float,
                  compression: float) -> SimulatedCell:
    """Draw ground truth, ensemble and observations for one grid cell."""
    s_innov, s_ens, s_noise = _child_seeds(seed, 3)
    schedule = spec.schedule
    w = make_innovations(spec.p, schedule, amplitude=spec.amplitude, seed=s_innov)
    traj = propagate_states(spec.theta, w)
    rows = row_counts_for_ratio(schedule, spec.p, 1.0 - compression)
    ens = build_ensemble(spec.p, rows, seed=s_ens)
    if spec.snr_reference == "full" and compression > 0:
        ref = build_ensemble(spec.p, row_counts_for_ratio(schedule, spec.p, 1.0), seed=s_ens)
        traj = scale_to_snr(ref, traj, spec.sigma2, snr_db)
    else:
        traj = scale_to_snr(ens, traj, spec.sigma2, snr_db)
    obs = observe(ens, traj, spec.sigma2, seed=s_noise)
    return SimulatedCell(seed, snr_db, compression, traj, ens, obs, schedule, spec.sigma2)


def _write_cell(spec_dict: dict, seed: int, snr: float, comp: float, root: str) -> str:
    spec = ExperimentSpec.from_dict(spec_dict)
    cell = simulate_cell(spec, seed, snr, comp)
    d = Path(root) / cell.name
    d.mkdir(parents=True, exist_ok=True)
    write_trace_csv(d / "states.csv", cell.trajectory.states)
    write_trace_csv(d / "innovations.csv", cell.trajectory.innovations)
    write_observations_csv(d / "observations.csv", cell.observations)
    save_ensemble(d / "ensemble.bin", cell.ensemble)
    meta = {
        "seed": seed, "snr_db": snr, "compression": comp, "theta": spec.theta,
        "sigma2": spec.sigma2, "schedule": cell.schedule.tolist(),
        "measured_snr_db": empirical_snr_db(cell.ensemble, cell.trajectory.states,
                                            cell.observations),
    }
    _write_json(d / "meta.json", meta)
    return str(d)


def cmd_simulate(spec: ExperimentSpec, workers: int | None = None) -> list[str]:
    """Write one directory of ground truth, ensemble and observations per cell."""
    workers = worker_count() if workers is None else workers
    root = Path(spec.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    _write_json(root / "experiment.json", spec.to_dict())
    jobs = [(spec.to_dict(), seed, snr, c, str(root)) for seed, snr, c in spec.cells()]
    return _map(_write_cell, jobs, workers)


def load_cell(path: str | Path) -> SimulatedCell:
    d = Path(path)
    meta = load_json(d / "meta.json")
    ens = load_ensemble(d / "ensemble.bin")
    states = read_trace_csv(d / "states.csv")
    innov = read_trace_csv(d / "innovations.csv")
    obs = read_observations_csv(d / "observations.csv", ens.row_counts)
    traj = StateTrajectory(theta=meta["theta"], states=states, innovations=innov)
    return SimulatedCell(meta["seed"], meta["snr_db"], meta["compression"], traj, ens,
                         obs, np.asarray(meta["schedule"], dtype=int), meta["sigma2"])


# ---------------------------------------------------------------------------
# real traces


@dataclass
class TraceDataset:
    """Recorded traces, one column per coordinate and one row per sample.

    `inactive` is an optional ``(start, stop)`` sample range without
    activity, used to estimate the noise variance.
    """

    traces: np.ndarray
    rate_hz: float = 30.0
    inactive: tuple | None = None

    def __post_init__(self):
        x = np.asarray(self.traces, dtype=float)
        if x.ndim != 2:
            raise ValueError("traces must be a 2-d array (samples x coordinates)")
        if x.shape[0] < 2:
            raise ValueError("need at least two samples")
        if not np.all(np.isfinite(x)):
            raise ValueError("traces contain non-finite values")
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        self.traces = x

    @property
    def T(self) -> int:
        return self.traces.shape[0]

    @property
    def p(self) -> int:
        return self.traces.shape[1]


def estimate_noise_variance(dataset: TraceDataset, inactive: tuple | None = None,
                            min_length: int = 30) -> float:
    """Median over coordinates of the sample variance on an inactive range."""
    rng = inactive if inactive is not None else dataset.inactive
    if rng is None:
        raise ValueError("no inactive range given")
    start, stop = int(rng[0]), int(rng[1])
    if not 0 <= start < stop <= dataset.T:
        raise ValueError(f"inactive range {start}:{stop} is outside 0:{dataset.T}")
    if stop - start < min_length:
        raise ValueError(f"inactive range needs at least {min_length} samples")
    seg = dataset.traces[start:stop]
    return float(np.median(seg.var(axis=0, ddof=1)))


@dataclass
class DeconvolutionOutput:
    result: DeconvolutionResult
    lower: np.ndarray
    upper: np.ndarray
    spikes: SpikeTrain
    sigma2: float


def deconvolve_traces(
    dataset: TraceDataset,
    config: SolverConfig,
    sigma2: float | None = None,
    sparsity: int = 1,
    observed_fraction: float = 1.0,
    seed: int = 0,
    level: float = 0.90,
) -> DeconvolutionOutput:
    """Denoise traces, optionally from a compressed view of them.

    With ``observed_fraction == 1`` every sample is observed directly
    (``A_t = I``). Otherwise each sample is compressed with a fresh Gaussian
    ensemble of ``ceil(fraction * p)`` rows, and the per-measurement noise
    variance becomes ``sigma2`` times the mean squared row norm.
    """
    if sigma2 is None:
        sigma2 = estimate_noise_variance(dataset)
    if not 0 < observed_fraction <= 1:
        raise ValueError("observed_fraction must lie in (0, 1]")
    if not 1 <= sparsity <= dataset.p:
        raise ValueError("sparsity must lie in [1, p]")
    T, p = dataset.T, dataset.p
    schedule = np.full(T, sparsity, dtype=int)
    if observed_fraction == 1:
        ens = build_ensemble(p, np.full(T, p), identity=True)
        obs = [row.copy() for row in dataset.traces]
        noise = sigma2
    else:
        n = int(np.ceil(observed_fraction * p))
        ens = build_ensemble(p, np.full(T, n), seed=seed)
        obs = [ens.A(t) @ dataset.traces[t] for t in range(T)]
        noise = sigma2 * float(np.mean(np.sum(ens.base**2, axis=1)))
    if noise <= 0:
        # traces without any noise still need a positive variance
        noise = np.finfo(float).eps * max(1.0, float(np.abs(dataset.traces).max()) ** 2)
    result = run(obs, ens, config, schedule, noise)
    lower, upper = result.bands(level)
    spikes = detect_spikes(result.states, lower, upper, result.theta)
    return DeconvolutionOutput(result, lower, upper, spikes, float(sigma2))


def write_deconvolution(out_dir: str | Path, out: DeconvolutionOutput) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    res = out.result
    write_trace_csv(d / "states.csv", res.states)
    write_trace_csv(d / "lower.csv", out.lower)
    write_trace_csv(d / "upper.csv", out.upper)
    write_trace_csv(d / "innovations.csv", res.innovations)
    write_raster_csv(d / "spikes.csv", out.spikes)
    with open(d / "objective.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iteration", "objective", "dual_objective", "theta"])
        for i, (f, g, th) in enumerate(zip(res.objective_trace, res.dual_trace,
                                           res.theta_trace)):
            wr.writerow([i, FLOAT_FMT % f, FLOAT_FMT % g, FLOAT_FMT % th])
    _write_json(d / "summary.json", {
        "theta": res.theta, "lambda": res.lam, "iterations": res.iterations,
        "converged": res.converged, "sigma2": out.sigma2, "spikes": len(out.spikes),
    })


def cmd_deconvolve(input_path: str | Path, config: SolverConfig, out_dir: str | Path,
                   sigma2: float | None = None, inactive: tuple | None = None,
                   sparsity: int = 1, observed_fraction: float = 1.0,
                   rate_hz: float = 30.0, seed: int = 0,
                   level: float = 0.90) -> DeconvolutionOutput:
    """Deconvolve a simulated cell directory or a trace CSV and write results."""
    src = Path(input_path)
    if src.is_dir():
        cell = load_cell(src)
        result = run(cell.observations, cell.ensemble, config, cell.schedule, cell.sigma2)
        lower, upper = result.bands(level)
        spikes = detect_spikes(result.states, lower, upper, result.theta)
        out = DeconvolutionOutput(result, lower, upper, spikes, cell.sigma2)
    else:
        data = TraceDataset(read_trace_csv(src), rate_hz=rate_hz, inactive=inactive)
        out = deconvolve_traces(data, config, sigma2=sigma2, sparsity=sparsity,
                                observed_fraction=observed_fraction, seed=seed,
                                level=level)
    write_deconvolution(out_dir, out)
    return out


def cmd_baseline(cell_dir: str | Path, out_dir: str | Path, lam_scale: float = 1.0,
                 config: BPConfig = BPConfig()) -> np.ndarray:
    """Per-step basis pursuit on a simulated cell; writes ``states.csv``."""
    cell = load_cell(cell_dir)
    ens = cell.ensemble
    lams = [lam_scale * bp_lambda(np.sqrt(cell.sigma2), cell.schedule[t],
                                  ens.row_counts[t], ens.p) for t in range(ens.T)]
    x = bp_sequence(ens, cell.observations, lams, config)
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_trace_csv(d / "states.csv", x)
    return x


# ---------------------------------------------------------------------------
# metrics


def time_averaged_error(a: np.ndarray, b: np.ndarray) -> float:
    """``(1/T) sum_t ||a_t - b_t||_2``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def match_events(true_mask: np.ndarray, detected: np.ndarray,
                 tolerance: int = 1) -> tuple[int, int, int]:
    """One-to-one matching of events per coordinate within ``tolerance`` samples.

    Returns ``(hits, n_true, n_detected)``. Each detected event claims the
    earliest unmatched true event in its window.
    """
    true_mask = np.asarray(true_mask, dtype=bool)
    detected = np.asarray(detected, dtype=bool)
    if true_mask.shape != detected.shape:
        raise ValueError("event masks must have the same shape")
    hits = 0
    for j in range(true_mask.shape[1]):
        truth = list(np.flatnonzero(true_mask[:, j]))
        used = [False] * len(truth)
        for t in np.flatnonzero(detected[:, j]):
            for k, tt in enumerate(truth):
                if not used[k] and abs(tt - t) <= tolerance:
                    used[k] = True
                    hits += 1
                    break
    return hits, int(true_mask.sum()), int(detected.sum())


def compute_metrics(
    truth: np.ndarray,
    estimate: np.ndarray,
    true_innovations: np.ndarray | None = None,
    spikes: SpikeTrain | np.ndarray | None = None,
    bound: float | None = None,
    tolerance: int = 1,
) -> dict:
    """Error and detection summary of one estimate.

    Detection scores are NaN unless both `true_innovations` and `spikes`
    are given; with no true and no detected events they are all 1.
    """
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    err = time_averaged_error(truth, estimate)
    energy = float(np.sum(truth**2))
    diff = float(np.sum((truth - estimate) ** 2))
    rel = diff / energy if energy > 0 else (0.0 if diff == 0 else float("inf"))
    out = {"l2_error": err, "relative_mse": rel, "precision": float("nan"),
           "recall": float("nan"), "f1": float("nan"), "bound": float("nan"),
           "bound_holds": ""}
    if true_innovations is not None and spikes is not None:
        mask = spikes.as_mask(truth.shape) if isinstance(spikes, SpikeTrain) else spikes
        hits, n_true, n_det = match_events(np.asarray(true_innovations) != 0, mask, tolerance)
        prec = hits / n_det if n_det else 1.0
        rec = hits / n_true if n_true else 1.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        out.update(precision=prec, recall=rec, f1=f1)
    if bound is not None:
        out.update(bound=float(bound), bound_holds=bool(err <= bound))
    return out


def cmd_metrics(cell_dir: str | Path, result_dir: str | Path,
                out_csv: str | Path, method: str = "dynamic") -> dict:
    """Compare a result directory against the ground truth of a cell."""
    cell = load_cell(cell_dir)
    rdir = Path(result_dir)
    est = read_trace_csv(rdir / "states.csv")
    spikes = None
    if (rdir / "spikes.csv").exists():
        spikes = read_raster_csv(rdir / "spikes.csv")
    row = compute_metrics(cell.trajectory.states, est, cell.trajectory.innovations, spikes)
    summary = load_json(rdir / "summary.json") if (rdir / "summary.json").exists() else {}
    row.update(seed=cell.seed, snr_db=cell.snr_db, compression=cell.compression,
               method=method, theta_hat=summary.get("theta", float("nan")),
               iterations=summary.get("iterations", ""), seconds="")
    write_metrics_csv(out_csv, [row])
    return row


# ---------------------------------------------------------------------------
# sweeps


def evaluate_cell(spec_dict: dict, seed: int, snr: float, comp: float,
                  with_baseline: bool = True) -> list[dict]:
    """Solve one cell with the dynamic solver (and basis pursuit) and score it."""
    spec = ExperimentSpec.from_dict(spec_dict)
    cell = simulate_cell(spec, seed, snr, comp)
    ens = cell.ensemble
    t0 = time.perf_counter()
    res = run(cell.observations, ens, spec.solver, cell.schedule, cell.sigma2)
    secs = time.perf_counter() - t0
    lower, upper = res.bands(0.90)
    spikes = detect_spikes(res.states, lower, upper, res.theta)
    base = {"seed": seed, "snr_db": snr, "compression": comp}
    rows = [dict(base, method="dynamic", theta_hat=res.theta, iterations=res.iterations,
                 seconds=secs, **compute_metrics(cell.trajectory.states, res.states,
                                                 cell.trajectory.innovations, spikes))]
    if with_baseline:
        lams = [bp_lambda(np.sqrt(cell.sigma2), cell.schedule[t], ens.row_counts[t], ens.p)
                for t in range(ens.T)]
        t0 = time.perf_counter()
        xb = bp_sequence(ens, cell.observations, lams)
        secs = time.perf_counter() - t0
        rows.append(dict(base, method="basis_pursuit", theta_hat=float("nan"),
                         iterations="", seconds=secs,
                         **compute_metrics(cell.trajectory.states, xb)))
    return rows


def run_sweep(spec: ExperimentSpec, workers: int | None = None,
              with_baseline: bool = True, timing: bool = False) -> list[dict]:
    """Evaluate every grid cell; cells run in parallel, rows are merged at the end.

    Wall-clock columns are blanked unless `timing` is set, so that reruns
    give identical metric files.
    """
    workers = worker_count() if workers is None else workers
    jobs = [(spec.to_dict(), seed, snr, c, with_baseline) for seed, snr, c in spec.cells()]
    rows = [r for cell_rows in _map(evaluate_cell, jobs, workers) for r in cell_rows]
    if not timing:
        for r in rows:
            r["seconds"] = ""
    return rows


# ---------------------------------------------------------------------------
# bound validation


def certified_ensemble(p: int, rows: Sequence[int], order: int, delta: float,
                       seed: int, max_tries: int = 100) -> MeasurementEnsemble:
    """First seeded Gaussian ensemble whose order-`order` RIP constant is certified below `delta`.

    Nesting makes every ``A~_t`` a rescaled row subset of ``A_1``; certifying
    each distinct ``A~_t`` covers them all.
    """
    rng = np.random.default_rng(seed)
    distinct = sorted(set(int(n) for n in rows))
    for _ in range(max_tries):
        ens = build_ensemble(p, rows, seed=int(rng.integers(2**63 - 1)))
        n1 = ens.n1
        if all(certify_rip(np.sqrt(n1 / n) * ens.base[:n], order, delta) for n in distinct):
            return ens
    raise ValueError(f"no ensemble passed the RIP check in {max_tries} draws")


def bound_trial(p: int, T: int, s: int, rows: Sequence[int], theta: float,
                sigma2: float, seed: int, config: SolverConfig | None = None,
                delta: float = 1.0 / 3.0) -> dict:
    """One exact-sparse, known-theta instance: error against the stability bound.

    The noise level in the bound is ``max_t ||sqrt(n_1/n_t) v_t||_2`` measured on
    the realized noise, and the regularization follows the rate rule.
    """
    s_innov, s_ens, s_noise = _child_seeds(seed, 3)
    schedule = np.full(T, s, dtype=int)
    ens = certified_ensemble(p, rows, 4 * s, delta, s_ens)
    w = make_innovations(p, schedule, amplitude="gaussian", seed=s_innov)
    traj = propagate_states(theta, w)
    obs = observe(ens, traj, sigma2, seed=s_noise)
    noise = [obs[t] - ens.A(t) @ traj.states[t] for t in range(T)]
    eps = max(np.sqrt(ens.n1 / ens.row_counts[t]) * np.linalg.norm(noise[t])
              for t in range(T))
    sig = [best_s_term(traj.innovations[t], s)[2] for t in range(T)]
    bound = theorem_bound(theta, T, ens.n1, int(ens.row_counts.min()), eps, sig, schedule)
    if config is None:
        config = SolverConfig(theta_init=theta, estimate_theta=False, outer_iters=30,
                              tol_objective=1e-9, tol_state=1e-9)
    res = run(obs, ens, config, schedule, sigma2)
    err = time_averaged_error(traj.states, res.states)
    return {"seed": seed, "l2_error": err, "bound": bound, "bound_holds": bool(err <= bound),
            "eps_noise": eps}


# ---------------------------------------------------------------------------
# lambda selection


def _holdout_split(ens: MeasurementEnsemble, obs: Sequence[np.ndarray], block: range):
    """Training ensemble without the rows in `block`, plus validation pieces.

    Moving the held-out rows of ``A_1`` to the end keeps the training
    matrices nested: each training ``A_t`` is again a leading block.
    """
    n1 = ens.n1
    keep = np.array([i for i in range(n1) if i not in block], dtype=int)
    held = np.array(list(block), dtype=int)
    base = np.vstack([ens.base[keep], ens.base[held]])
    rows, y_train, val = [], [], []
    for t in range(ens.T):
        n = ens.row_counts[t]
        k = keep[keep < n]
        h = held[held < n]
        if k.size == 0:
            raise ValueError("a fold removes every row of some A_t")
        rows.append(k.size)
        y_train.append(obs[t][k])
        val.append((ens.base[h], obs[t][h]))
    return MeasurementEnsemble(base=base, row_counts=np.array(rows), seed=ens.seed), \
        y_train, val


def _cv_job(ens, obs, block, schedule, sigma2, config):
    train, y_train, val = _holdout_split(ens, obs, block)
    res = run(y_train, train, config, schedule, sigma2)
    return float(sum(np.sum((y - A @ res.states[t]) ** 2) for t, (A, y) in enumerate(val)))


def cross_validate_lambda(
    observations: Sequence[np.ndarray],
    ensemble: MeasurementEnsemble,
    schedule: Sequence[int],
    sigma2: float,
    scales: Sequence[float],
    config: SolverConfig = SolverConfig(),
    folds: int = 5,
    workers: int | None = None,
) -> tuple[float, np.ndarray]:
    """Pick ``lambda_scale`` by K-fold held-out prediction error over rows of ``A_1``.

    Fold k holds out a contiguous block of base rows at every time step.
    Returns the best scale and the (scales, folds) error table; jobs run in
    parallel across folds and scales.
    """
    workers = worker_count() if workers is None else workers
    if folds < 2 or len(scales) == 0:
        raise ValueError("need at least two folds and one scale")
    edges = np.linspace(0, ensemble.n1, folds + 1).astype(int)
    blocks = [range(edges[k], edges[k + 1]) for k in range(folds)]
    jobs = [(ensemble, list(observations), b, np.asarray(schedule), sigma2,
             replace(config, lam=None, lambda_scale=float(sc)))
            for sc in scales for b in blocks]
    errs = np.array(_map(_cv_job, jobs, workers)).reshape(len(scales), folds)
    return float(scales[int(np.argmin(errs.sum(axis=1)))]), errs


# ---------------------------------------------------------------------------
# file formats


def _write_json(path: Path, data: dict) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trace_csv(path: str | Path, traces: np.ndarray) -> None:
    x = np.asarray(traces, dtype=float)
    if x.ndim != 2:
        raise ValueError("traces must be 2-d")
    header = ",".join(f"coord_{j}" for j in range(x.shape[1]))
    np.savetxt(path, x, delimiter=",", fmt=FLOAT_FMT, header=header, comments="")


def read_trace_csv(path: str | Path) -> np.ndarray:
    """Parse a trace CSV; malformed rows are reported with their line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        p = len(header)
        if header != [f"coord_{j}" for j in range(p)]:
            raise ValueError(f"{path}:1: header must be coord_0..coord_{p - 1}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != p:
                raise ValueError(f"{path}:{line}: expected {p} values, found {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{line}: non-numeric value") from None
    if not rows:
        raise ValueError(f"{path}: no samples")
    return np.array(rows, dtype=float)


def write_raster_csv(path: str | Path, spikes: SpikeTrain) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["coordinate", "time_index", "amplitude"])
        for j, t, a in zip(spikes.coords, spikes.times, spikes.amplitudes):
            wr.writerow([int(j), int(t), FLOAT_FMT % a])


def read_raster_csv(path: str | Path) -> SpikeTrain:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["coordinate", "time_index", "amplitude"]:
            raise ValueError(f"{path}:1: expected columns coordinate,time_index,amplitude")
        rows = list(reader)
    return SpikeTrain(
        coords=np.array([int(r["coordinate"]) for r in rows], dtype=int),
        times=np.array([int(r["time_index"]) for r in rows], dtype=int),
        amplitudes=np.array([float(r["amplitude"]) for r in rows]),
    )


def write_observations_csv(path: str | Path, observations: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["time_index", "row_index", "value"])
        for t, y in enumerate(observations):
            for i, v in enumerate(y):
                wr.writerow([t, i, FLOAT_FMT % v])


def read_observations_csv(path: str | Path, row_counts: Sequence[int]) -> list[np.ndarray]:
    obs = [np.full(int(n), np.nan) for n in row_counts]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            t, i, v = int(row[0]), int(row[1]), float(row[2])
            if not (0 <= t < len(obs) and 0 <= i < len(obs[t])):
                raise ValueError(f"{path}:{reader.line_num}: index out of range")
            obs[t][i] = v
    if any(np.isnan(y).any() for y in obs):
        raise ValueError(f"{path}: missing observation entries")
    return obs


def _fmt(v) -> str:
    if isinstance(v, bool) or v == "":
        return str(v)
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_metrics_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(METRIC_FIELDS)
        for r in rows:
            wr.writerow([_fmt(r.get(k, "")) for k in METRIC_FIELDS])
