"""Compressible linear state-space model.

States evolve as ``x_t = theta * x_{t-1} + w_t`` with ``x_0 = 0`` and are
observed through nested compressive matrices, ``y_t = A_t x_t + v_t``.
Arrays of per-time quantities are stored with time on the first axis,
so ``states[t]`` is the state at (zero-based) time ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from dyncs.sensing import MeasurementEnsemble


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the compressible state-space model and its estimator.

    Parameters
    ----------
    theta : float
        Scalar state transition, ``|theta| < 1``.
    sigma2 : float or array of float, shape (T,)
        Noise variance entering the data term ``||y_t - A_t x_t||^2 /
        (2 sigma2 n_t)``; a per-time array is allowed.
    lam : float
        Weight of the innovation l1 penalty.
    eps_smooth : float
        Smoothing floor used by the reweighting scheme.
    schedule : array of int, shape (T,)
        Sparsity level ``s_t`` per time step.
    row_counts : array of int, shape (T,)
        Number of measurements ``n_t`` per time step.
    p : int
        State dimension.
    """

    theta: float
    sigma2: float | np.ndarray
    lam: float
    eps_smooth: float
    schedule: np.ndarray
    row_counts: np.ndarray
    p: int

    def __post_init__(self):
        schedule = np.asarray(self.schedule, dtype=int)
        rows = np.asarray(self.row_counts, dtype=int)
        object.__setattr__(self, "schedule", schedule)
        object.__setattr__(self, "row_counts", rows)
        if not abs(self.theta) < 1:
            raise ValueError(f"|theta| must be < 1, got {self.theta}")
        if not np.all(np.asarray(self.sigma2) > 0):
            raise ValueError("sigma2 must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.eps_smooth > 0:
            raise ValueError("eps_smooth must be positive")
        if schedule.shape != rows.shape or schedule.ndim != 1:
            raise ValueError("schedule and row_counts must be 1-d of equal length")
        # n_t may exceed p (uncompressed sweeps use n_1 = 2p); s_t may not
        if np.any(schedule < 1) or np.any(schedule > rows) or np.any(schedule > self.p):
            raise ValueError("need 1 <= s_t <= min(n_t, p) for every t")

    @property
    def T(self) -> int:
        return len(self.schedule)


@dataclass(frozen=True)
class StateTrajectory:
    """States and innovations over ``T`` steps, both shaped ``(T, p)``."""

    theta: float
    states: np.ndarray
    innovations: np.ndarray

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def p(self) -> int:
        return self.states.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return np.zeros(self.p)

    def scaled(self, factor: float) -> "StateTrajectory":
        return propagate_states(self.theta, factor * self.innovations)


@dataclass(frozen=True)
class CompressibilityReport:
    """Best s-term errors of the innovations, one entry per time step."""

    errors: np.ndarray
    supports: list = field(default_factory=list)


def _amplitudes(rng: np.random.Generator, size: int, dist: str) -> np.ndarray:
    if dist == "gaussian":
        return rng.standard_normal(size)
    if dist == "positive":
        return np.abs(rng.standard_normal(size))
    if dist == "uniform":
        return rng.uniform(0.5, 1.5, size)
    raise ValueError(f"unknown amplitude distribution {dist!r}")


def make_innovations(
    p: int,
    schedule: Sequence[int],
    mode: str = "sparse",
    xi: float | None = None,
    amplitude: str = "positive",
    seed: int | None = None,
) -> np.ndarray:
    """Draw an innovation sequence of shape ``(T, p)``.

    In ``"sparse"`` mode, ``w_t`` has exactly ``s_t`` nonzeros on a uniformly
    random support with amplitudes from `amplitude` (``"gaussian"``,
    ``"positive"`` half-normal or ``"uniform"`` on [0.5, 1.5]).

    In ``"compressible"`` mode every ``w_t`` with ``s_t > 0`` has sorted
    magnitudes proportional to ``k**(-1/xi)``, randomly permuted, with random
    signs unless ``amplitude == "positive"``, and unit l2 norm.
    """
    schedule = np.asarray(schedule, dtype=int)
    if np.any(schedule < 0) or np.any(schedule > p):
        raise ValueError("sparsity levels must lie in [0, p]")
    rng = np.random.default_rng(seed)
    T = len(schedule)
    w = np.zeros((T, p))
    if mode == "sparse":
        for t, s in enumerate(schedule):
            if s == 0:
                continue
            support = rng.choice(p, size=s, replace=False)
            w[t, support] = _amplitudes(rng, s, amplitude)
    elif mode == "compressible":
        if xi is None or not 0 < xi < 1:
            raise ValueError("compressible mode needs xi in (0, 1)")
        decay = np.arange(1, p + 1, dtype=float) ** (-1.0 / xi)
        decay /= np.linalg.norm(decay)
        for t, s in enumerate(schedule):
            if s == 0:
                continue
            if amplitude == "positive":
                signs = np.ones(p)
            else:
                signs = rng.choice([-1.0, 1.0], size=p)
            w[t, rng.permutation(p)] = signs * decay
    else:
        raise ValueError(f"unknown innovation mode {mode!r}")
    return w


def propagate_states(theta: float, innovations: np.ndarray) -> StateTrajectory:
    """Run the AR(1) recursion from ``x_0 = 0``.

    The returned innovations are recomputed as ``x_t - theta * x_{t-1}`` from
    the propagated states, so the stored pair satisfies the recursion with
    zero floating-point residual. Exact zeros stay exact zeros.
    """
    if not abs(theta) < 1:
        raise ValueError(f"|theta| must be < 1, got {theta}")
    w = np.asarray(innovations, dtype=float)
    x = np.empty_like(w)
    prev = np.zeros(w.shape[1])
    for t in range(w.shape[0]):
        x[t] = theta * prev + w[t]
        prev = x[t]
    return StateTrajectory(theta=theta, states=x, innovations=innovation_sequence(x, theta))


def innovation_sequence(states: np.ndarray, theta: float) -> np.ndarray:
    """``x_t - theta * x_{t-1}`` for every t, with ``x_0 = 0``."""
    states = np.asarray(states, dtype=float)
    prev = np.vstack([np.zeros((1, states.shape[1])), states[:-1]])
    return states - theta * prev


def best_s_term(v: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Best s-term approximation of `v` in the l1 sense.

    Returns
    -------
    support : ndarray of int
        Indices of the `s` largest-magnitude entries, ties going to the
        lower index, sorted ascending.
    approx : ndarray
        `v` restricted to `support`.
    sigma : float
        l1 norm of the remainder ``v - approx``.
    """
    v = np.asarray(v, dtype=float)
    if not 0 <= s <= v.size:
        raise ValueError(f"s must lie in [0, {v.size}], got {s}")
    order = np.argsort(-np.abs(v), kind="stable")
    support = np.sort(order[:s])
    approx = np.zeros_like(v)
    approx[support] = v[support]
    return support, approx, float(np.abs(v - approx).sum())


def compressibility_report(
    states: np.ndarray, theta: float, schedule: Sequence[int]
) -> CompressibilityReport:
    w = innovation_sequence(states, theta)
    errors, supports = [], []
    for t, s in enumerate(schedule):
        support, _, err = best_s_term(w[t], int(s))
        errors.append(err)
        supports.append(support)
    return CompressibilityReport(errors=np.array(errors), supports=supports)


def _check_dims(states, ensemble, observations):
    if states.shape != (ensemble.T, ensemble.p):
        raise ValueError(
            f"states have shape {states.shape}, expected {(ensemble.T, ensemble.p)}"
        )
    if len(observations) != ensemble.T:
        raise ValueError("need one observation vector per time step")
    for t, y in enumerate(observations):
        if len(y) != ensemble.row_counts[t]:
            raise ValueError(f"observation {t} has length {len(y)}, expected n_t")


def data_misfit(
    states: np.ndarray,
    ensemble: "MeasurementEnsemble",
    observations: Sequence[np.ndarray],
    sigma2: float | np.ndarray,
) -> np.ndarray:
    """Per-time data terms ``||y_t - A_t x_t||^2 / (2 sigma2_t n_t)``."""
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (ensemble.T,))
    out = np.empty(ensemble.T)
    for t, y in enumerate(observations):
        r = y - ensemble.A(t) @ states[t]
        out[t] = r @ r / (2.0 * sigma2[t] * ensemble.row_counts[t])
    return out


def dual_objective(
    states: np.ndarray,
    theta: float,
    ensemble: "MeasurementEnsemble",
    observations: Sequence[np.ndarray],
    params: ModelParams,
) -> float:
    """Lagrangian dynamic-CS objective.

    ``lam * sum_t ||x_t - theta x_{t-1}||_1 / sqrt(s_t)
    + sum_t ||y_t - A_t x_t||^2 / (2 sigma2 n_t)``
    """
    states = np.asarray(states, dtype=float)
    _check_dims(states, ensemble, observations)
    w = innovation_sequence(states, theta)
    penalty = np.abs(w).sum(axis=1) / np.sqrt(params.schedule)
    return float(
        params.lam * penalty.sum()
        + data_misfit(states, ensemble, observations, params.sigma2).sum()
    )


def smoothed_objective(
    states: np.ndarray,
    theta: float,
    ensemble: "MeasurementEnsemble",
    observations: Sequence[np.ndarray],
    params: ModelParams,
) -> float:
    """Dual objective with ``|u|`` replaced by ``sqrt(u**2 + eps**2)``.

    This is the function the reweighting iterations decrease monotonically.
    """
    states = np.asarray(states, dtype=float)
    _check_dims(states, ensemble, observations)
    w = innovation_sequence(states, theta)
    penalty = np.sqrt(w**2 + params.eps_smooth**2).sum(axis=1) / np.sqrt(params.schedule)
    return float(
        params.lam * penalty.sum()
        + data_misfit(states, ensemble, observations, params.sigma2).sum()
    )


def theorem_bound(
    theta: float,
    T: int,
    n1: int,
    n2: int,
    eps_noise: float,
    sigma_terms: Sequence[float],
    schedule: Sequence[int],
) -> float:
    """Upper bound on the time-averaged l2 reconstruction error.

    ``(1 - theta**T) / (1 - theta) * (12.6 * (1 + (sqrt(n1) - sqrt(n2)) /
    (T sqrt(n2))) * eps + 3/T * sum_t sigma_t / sqrt(s_t))``, where
    ``sigma_t`` is the best ``s_t``-term l1 error of the t-th innovation and
    `eps_noise` bounds the rescaled noise norms.
    """
    if not abs(theta) < 1:
        raise ValueError("|theta| must be < 1")
    if not n1 >= n2 >= 1:
        raise ValueError("need n1 >= n2 >= 1")
    if eps_noise < 0:
        raise ValueError("eps_noise must be non-negative")
    sigma_terms = np.asarray(sigma_terms, dtype=float)
    schedule = np.asarray(schedule, dtype=float)
    gain = (1.0 - theta**T) / (1.0 - theta)
    noise = 12.6 * (1.0 + (np.sqrt(n1) - np.sqrt(n2)) / (T * np.sqrt(n2))) * eps_noise
    tail = 3.0 / T * np.sum(sigma_terms / np.sqrt(schedule))
    return float(gain * (noise + tail))
