"""Nested compressive measurement ensembles.

Every per-time matrix ``A_t`` is the first ``n_t`` rows of a single base
matrix ``A_1``, so only ``A_1`` is stored.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dyncs.model import StateTrajectory

_MAGIC = b"DCSENS01"


@dataclass(frozen=True)
class MeasurementEnsemble:
    """Base matrix and row counts; ``A(t)`` returns a view, never a copy."""

    base: np.ndarray
    row_counts: np.ndarray
    seed: int = 0

    def __post_init__(self):
        base = np.asarray(self.base, dtype=float)
        rows = np.asarray(self.row_counts, dtype=np.int64)
        if rows.ndim != 1 or rows.size == 0 or np.any(rows < 1):
            raise ValueError("row_counts must be a non-empty sequence of positive ints")
        if rows.max() > base.shape[0]:
            raise ValueError(
                f"row count {rows.max()} exceeds the {base.shape[0]} rows of A_1"
            )
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "row_counts", rows)

    @property
    def p(self) -> int:
        return self.base.shape[1]

    @property
    def T(self) -> int:
        return len(self.row_counts)

    @property
    def n1(self) -> int:
        return int(self.row_counts[0])

    def A(self, t: int) -> np.ndarray:
        return self.base[: self.row_counts[t]]

    def A_tilde(self, t: int) -> np.ndarray:
        return np.sqrt(self.n1 / self.row_counts[t]) * self.A(t)

    def gram(self, t: int) -> np.ndarray:
        A = self.A(t)
        return A.T @ A


def row_counts_for_ratio(schedule: Sequence[int], p: int, ratio: float) -> np.ndarray:
    """Row counts ``n_t = ceil(C s_t log p)`` with aggregate ``sum n_t / (T p) = ratio``.

    ``C`` is chosen so that ``sum_t s_t / sum_t n_t`` equals ``s_t / n_t`` up
    to rounding, which keeps every ``n_t`` proportional to ``s_t``.
    """
    schedule = np.asarray(schedule, dtype=float)
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    C = ratio * p * len(schedule) / (np.log(p) * schedule.sum())
    # guard against ceil() turning an exact integer into the next one
    return np.ceil(np.round(C * schedule * np.log(p), 9)).astype(np.int64)


def build_ensemble(
    p: int,
    row_counts: Sequence[int],
    seed: int | None = 0,
    identity: bool = False,
) -> MeasurementEnsemble:
    """Gaussian ensemble with i.i.d. ``N(0, 1/n_1)`` entries in ``A_1``.

    ``n_1`` must be the largest row count. ``identity=True`` replaces ``A_1``
    with the ``p x p`` identity (pure denoising).
    """
    rows = np.asarray(row_counts, dtype=np.int64)
    n1 = int(rows[0])
    if np.any(rows > n1):
        raise ValueError("n_t must not exceed n_1")
    if identity:
        if n1 != p:
            raise ValueError("identity ensemble needs n_1 == p")
        base = np.eye(p)
    else:
        rng = np.random.default_rng(seed)
        base = rng.standard_normal((n1, p)) / np.sqrt(n1)
    return MeasurementEnsemble(base=base, row_counts=rows, seed=0 if seed is None else seed)


def observe(
    ensemble: MeasurementEnsemble,
    trajectory: StateTrajectory | np.ndarray,
    sigma2: float,
    seed: int | None = 0,
) -> list[np.ndarray]:
    """Noisy observations ``y_t = A_t x_t + v_t`` with ``v_t ~ N(0, sigma2 I)``."""
    states = trajectory.states if isinstance(trajectory, StateTrajectory) else trajectory
    states = np.asarray(states, dtype=float)
    if states.shape != (ensemble.T, ensemble.p):
        raise ValueError(f"states shape {states.shape} does not match ensemble")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(sigma2)
    out = []
    for t in range(ensemble.T):
        noise = rng.standard_normal(ensemble.row_counts[t])
        out.append(ensemble.A(t) @ states[t] + sd * noise)
    return out


def signal_energy(ensemble: MeasurementEnsemble, states: np.ndarray) -> float:
    return float(sum(np.sum((ensemble.A(t) @ states[t]) ** 2) for t in range(ensemble.T)))


def scale_to_snr(
    ensemble: MeasurementEnsemble,
    trajectory: StateTrajectory,
    sigma2: float,
    snr_db: float,
) -> StateTrajectory:
    """Rescale the innovations so ``sum ||A_t x_t||^2 / (sigma2 sum n_t)`` hits `snr_db`."""
    energy = signal_energy(ensemble, trajectory.states)
    if energy == 0:
        raise ValueError("cannot scale a zero trajectory to a target SNR")
    target = 10 ** (snr_db / 10) * sigma2 * ensemble.row_counts.sum()
    return trajectory.scaled(np.sqrt(target / energy))


def empirical_snr_db(
    ensemble: MeasurementEnsemble,
    states: np.ndarray,
    observations: Sequence[np.ndarray],
) -> float:
    clean = [ensemble.A(t) @ states[t] for t in range(ensemble.T)]
    signal = sum(float(c @ c) for c in clean)
    noise = sum(float((y - c) @ (y - c)) for y, c in zip(observations, clean))
    return 10 * np.log10(signal / noise)


def rip_constant(matrix: np.ndarray, s: int, max_combinations: int = 100_000) -> float:
    """Restricted isometry constant of order `s` by exhaustive enumeration.

    Raises ``ValueError`` when ``C(p, s)`` exceeds `max_combinations`.
    """
    A = np.asarray(matrix, dtype=float)
    p = A.shape[1]
    if not 1 <= s <= p:
        raise ValueError(f"s must lie in [1, {p}]")
    count = math.comb(p, s)
    if count > max_combinations:
        raise ValueError(f"C({p}, {s}) = {count} subsets exceeds budget {max_combinations}")
    G = A.T @ A
    delta = 0.0
    combos = itertools.combinations(range(p), s)
    while True:
        chunk = np.array(list(itertools.islice(combos, 4096)), dtype=np.intp)
        if chunk.size == 0:
            break
        sub = G[chunk[:, :, None], chunk[:, None, :]]
        eig = np.linalg.eigvalsh(sub)
        delta = max(delta, float(np.max(eig[:, -1] - 1)), float(np.max(1 - eig[:, 0])))
    return delta


def rip_upper_bound(matrix: np.ndarray, s: int) -> float:
    """Gershgorin upper bound on the order-`s` restricted isometry constant.

    For any support ``S`` of size `s`, each eigenvalue of ``G_SS`` lies within
    ``|G_jj - 1| + sum of the s-1 largest |G_jk|, k != j`` of 1 for some j in
    S. Cheap, valid for any p, and never below the exact constant.
    """
    A = np.asarray(matrix, dtype=float)
    G = A.T @ A
    off = np.abs(G - np.diag(np.diag(G)))
    off.sort(axis=1)
    radius = off[:, off.shape[1] - (s - 1):].sum(axis=1) if s > 1 else 0.0
    return float(np.max(np.abs(np.diag(G) - 1) + radius))


def certify_rip(
    matrix: np.ndarray, s: int, delta: float, max_combinations: int = 100_000
) -> bool:
    """True only if the order-`s` RIP constant is provably below `delta`.

    Uses exhaustive enumeration when affordable, the Gershgorin bound
    otherwise.
    """
    p = np.shape(matrix)[1]
    if math.comb(p, s) <= max_combinations:
        return rip_constant(matrix, s, max_combinations) < delta
    return rip_upper_bound(matrix, s) < delta


def save_ensemble(path: str | Path, ensemble: MeasurementEnsemble) -> None:
    """Binary container: magic, ``p``, ``T``, seed, row counts, row-major ``A_1``.

    All integers are little-endian int64, the payload little-endian float64.
    """
    base = np.ascontiguousarray(ensemble.base, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqqq", ensemble.p, ensemble.T, ensemble.seed, base.shape[0]))
        fh.write(ensemble.row_counts.astype("<i8").tobytes())
        fh.write(base.tobytes(order="C"))


def load_ensemble(path: str | Path) -> MeasurementEnsemble:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not an ensemble file")
    p, T, seed, n1 = struct.unpack_from("<qqqq", data, 8)
    offset = 8 + 32
    rows = np.frombuffer(data, dtype="<i8", count=T, offset=offset)
    offset += 8 * T
    base = np.frombuffer(data, dtype="<f8", count=n1 * p, offset=offset).reshape(n1, p)
    return MeasurementEnsemble(base=base.copy(), row_counts=rows.copy(), seed=seed)
