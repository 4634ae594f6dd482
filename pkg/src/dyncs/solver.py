"""Nested EM solver for sparse dynamic deconvolution.

The outer loop is iteratively reweighted least squares: each l1 innovation
penalty is majorized by an epsilon-smoothed quadratic whose weights come
from the previous iterate. Each weighted quadratic problem is the MAP
problem of a Gaussian state-space model, which the inner loop solves with a
fixed-interval smoother (E-step) while re-estimating the transition
``theta`` from the smoothed moments (M-step).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.stats import norm

from dyncs.model import ModelParams, innovation_sequence, smoothed_objective, dual_objective
from dyncs.sensing import MeasurementEnsemble
from dyncs.smoother import InnerSSMSpec, SmootherResult, fixed_interval_smooth

log = logging.getLogger(__name__)

THETA_MARGIN = 1e-6


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``lam=None`` selects ``lambda_scale`` times the rate rule of
    `default_lambda`, converted to the objective's normalization (see
    `auto_lambda`). With ``estimate_theta=False`` the transition stays at
    `theta_init`, which then plays the role of the known ``theta``.

    `noise_scaling` fixes what the ``sigma2`` of the data term means.
    ``"measurement"`` divides the per-measurement noise variance by ``n_t``,
    so the Gaussian surrogate sees the true noise level and its covariances
    are calibrated. ``"literal"`` plugs the per-measurement variance in
    directly, which inflates surrogate covariances by ``n_t``.

    ``theta_init=None`` starts from `moment_theta`. `startup_iters` is the
    number of EM iterations of the Gaussian start (see `gaussian_start`);
    ``None`` reuses `inner_iters`, or a single pass when theta is fixed.
    """

    lam: float | None = None
    lambda_scale: float = 1.0
    eps_smooth: float = 1e-10
    outer_iters: int = 20
    inner_iters: int = 5
    tol_objective: float = 1e-6
    tol_state: float = 1e-6
    theta_init: float | None = None
    estimate_theta: bool = True
    noise_scaling: str = "measurement"
    startup_iters: int | None = None

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("outer_iters and inner_iters must be >= 1")
        if self.startup_iters is not None and self.startup_iters < 1:
            raise ValueError("startup_iters must be >= 1")
        if self.tol_objective <= 0 or self.tol_state <= 0:
            raise ValueError("tolerances must be positive")
        if self.eps_smooth <= 0:
            raise ValueError("eps_smooth must be positive")
        if self.lam is not None and self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.theta_init is None:
            if not self.estimate_theta:
                raise ValueError("a fixed theta needs theta_init")
        elif not abs(self.theta_init) < 1:
            raise ValueError("|theta_init| must be < 1")
        if self.noise_scaling not in ("measurement", "literal"):
            raise ValueError("noise_scaling must be 'measurement' or 'literal'")

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class DeconvolutionResult:
    states: np.ndarray
    theta: float
    innovations: np.ndarray
    variances: np.ndarray
    lam: float
    objective_trace: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    theta_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    fallbacks: int = 0

    def bands(self, level: float = 0.90) -> tuple[np.ndarray, np.ndarray]:
        return confidence_bands(self, level)


def default_lambda(sigma: float, s_total: float, n_total: float, p: int) -> float:
    """``2 sqrt(2) sigma sqrt((s/n) log p)`` with aggregate ``s/n``."""
    if min(sigma, s_total, n_total, p) <= 0:
        raise ValueError("all arguments must be positive")
    return float(2.0 * np.sqrt(2.0) * sigma * np.sqrt(s_total / n_total * np.log(p)))


def effective_sigma2(sigma2: float, row_counts: np.ndarray, noise_scaling: str) -> np.ndarray:
    """Per-time variance entering ``||y_t - A_t x_t||^2 / (2 sigma2_t n_t)``."""
    rows = np.asarray(row_counts, dtype=float)
    if noise_scaling == "measurement":
        return sigma2 / rows
    return np.full(rows.shape, float(sigma2))


def auto_lambda(
    sigma2: float, schedule: Sequence[int], row_counts: Sequence[int], p: int,
    noise_scaling: str = "measurement",
) -> float:
    """Rate rule expressed in the objective's units.

    `default_lambda` is the weight of a per-step lasso
    ``||y - A x||^2 / 2 + lam_rule ||x||_1``. Multiplying the per-time
    objective by ``n_t sigma2_t`` brings it to that form with weight
    ``lam * n_t sigma2_t / sqrt(s_t)``; solving for ``lam`` with averages
    over time gives the value returned here.
    """
    schedule = np.asarray(schedule, dtype=float)
    rows = np.asarray(row_counts, dtype=float)
    rule = default_lambda(np.sqrt(sigma2), schedule.sum(), rows.sum(), p)
    data_scale = np.mean(rows * effective_sigma2(sigma2, rows, noise_scaling))
    return float(rule * np.sqrt(schedule.mean()) / data_scale)


def outer_weights(
    states: np.ndarray, theta: float, schedule: Sequence[int], eps_smooth: float
) -> np.ndarray:
    """Reweighting factors ``1 / (sqrt(s_t) sqrt(delta**2 + eps**2))``, shape (T, p)."""
    delta = innovation_sequence(states, theta)
    root_s = np.sqrt(np.asarray(schedule, dtype=float))[:, None]
    return 1.0 / (root_s * np.sqrt(delta**2 + eps_smooth**2))


def inner_spec_from_weights(
    weights: np.ndarray,
    lam: float,
    theta: float,
    ensemble: MeasurementEnsemble,
    sigma2: float | np.ndarray,
) -> InnerSSMSpec:
    """Gaussian model whose MAP problem is the weighted quadratic surrogate.

    Innovation variances are ``1 / (lam * weight)`` and the observation
    noise variance at time t is ``n_t * sigma2_t``.
    """
    if lam <= 0:
        raise ValueError("lam must be positive for the Gaussian surrogate")
    return InnerSSMSpec(
        theta=theta,
        q=1.0 / (lam * np.asarray(weights)),
        r=ensemble.row_counts * sigma2,
        ensemble=ensemble,
    )


def update_theta(
    result: SmootherResult,
    weights: np.ndarray,
    theta_current: float | None = None,
    margin: float = THETA_MARGIN,
) -> float:
    """Weighted moment ratio for the transition, clamped inside (-1, 1).

    The numerator sums ``w * (m_{t-1} m_t + C_{t-1,t})`` and the denominator
    ``w * (m_{t-1}**2 + V_{t-1})`` over time and coordinates, with ``x_0 = 0``
    contributing nothing. A zero denominator returns `theta_current`.
    """
    m, V = result.means, result.variances
    w = weights[1:]
    num = np.sum(w * (m[:-1] * m[1:] + result.lag_one_diag[1:]))
    den = np.sum(w * (m[:-1] ** 2 + V[:-1]))
    if not den > 0:
        return theta_current
    theta = num / den
    limit = 1.0 - margin
    if abs(theta) > limit:
        log.debug("clamping theta %.6g to +/-%.6g", theta, limit)
        theta = float(np.clip(theta, -limit, limit))
    return float(theta)


def moment_theta(
    observations: Sequence[np.ndarray],
    ensemble: MeasurementEnsemble,
    sigma2: float | np.ndarray,
    fallback: float = 0.5,
    limit: float = 0.99,
) -> float:
    """Lag-one moment estimate of theta from the rows all times share.

    Nesting means the first ``min n_t`` rows measure every state with the
    same matrix ``B``, so ``E <B x_t, B x_{t-1}> = theta E ||B x_{t-1}||^2``.
    The noise power is removed from the denominator. Returns `fallback` when
    the corrected denominator is not positive, e.g. for pure noise. The
    value is kept within `limit` of zero: EM started at the clamp tends to
    stay there.
    """
    T = ensemble.T
    if T < 2:
        return fallback
    k = int(ensemble.row_counts.min())
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (T,))
    num = sum(float(observations[t][:k] @ observations[t - 1][:k]) for t in range(1, T))
    den = sum(
        float(observations[t - 1][:k] @ observations[t - 1][:k]) - k * s2[t - 1]
        for t in range(1, T)
    )
    if not den > 0:
        return fallback
    return float(np.clip(num / den, -limit, limit))


def innovation_power(result: SmootherResult, theta: float) -> float:
    """Posterior mean of ``(x_t - theta x_{t-1})**2`` averaged over t and j."""
    m, V, C = result.means, result.variances, result.lag_one_diag
    p = m.shape[1]
    m_prev = np.vstack([np.zeros(p), m[:-1]])
    V_prev = np.vstack([np.zeros(p), V[:-1]])
    return float(np.mean((m - theta * m_prev) ** 2 + V - 2 * theta * C + theta**2 * V_prev))


def gaussian_start(
    observations: Sequence[np.ndarray],
    ensemble: MeasurementEnsemble,
    theta: float,
    sigma2_obs: float | np.ndarray,
    sigma2: np.ndarray,
    q_min: float,
    config: SolverConfig,
) -> tuple[np.ndarray, float, SmootherResult]:
    """Start point from a Gaussian model with one shared innovation variance.

    The variance starts at the moment value ``(1 - theta**2) * mean power``
    implied by the observations and is refit by EM together with theta (when
    estimated). Tying the start to the signal scale, rather than to ``1 /
    lam``, keeps the first theta updates from drifting towards one at high
    SNR, where ``1 / lam`` is far below the true innovation power.
    """
    T = ensemble.T
    rows = ensemble.row_counts
    s2 = np.broadcast_to(np.asarray(sigma2_obs, dtype=float), (T,))
    energy = [
        (ensemble.n1 / rows[t]) * (float(observations[t] @ observations[t]) - rows[t] * s2[t])
        for t in range(T)
    ]
    power = max(float(np.mean(energy)) / ensemble.p, 0.0)
    q = max((1.0 - theta**2) * power, q_min)
    if config.startup_iters is not None:
        n_iter = config.startup_iters
    else:
        n_iter = config.inner_iters if config.estimate_theta else 1
    ones = np.ones((T, ensemble.p))
    for _ in range(n_iter):
        spec = InnerSSMSpec(theta=theta, q=np.full((T, ensemble.p), q), r=rows * sigma2,
                            ensemble=ensemble)
        sm = fixed_interval_smooth(spec, observations, full=False)
        if config.estimate_theta:
            theta = update_theta(sm, ones, theta)
        q = max(innovation_power(sm, theta), q_min)
    return sm.means, theta, sm


def run_inner_em(
    observations: Sequence[np.ndarray],
    ensemble: MeasurementEnsemble,
    weights: np.ndarray,
    theta: float,
    lam: float,
    sigma2: float | np.ndarray,
    config: SolverConfig,
) -> tuple[np.ndarray, float, SmootherResult]:
    """Alternate smoothing and the theta update for fixed outer weights.

    Returns the last smoothed means, the final theta and the smoother result
    the means came from. Without theta estimation all inner iterations would
    be identical, so only one smoother pass runs.
    """
    n_iter = config.inner_iters if config.estimate_theta else 1
    for _ in range(n_iter):
        spec = inner_spec_from_weights(weights, lam, theta, ensemble, sigma2)
        sm = fixed_interval_smooth(spec, observations, full=False)
        if config.estimate_theta:
            theta = update_theta(sm, weights, theta)
    return sm.means, theta, sm


def run(
    observations: Sequence[np.ndarray],
    ensemble: MeasurementEnsemble,
    config: SolverConfig,
    schedule: Sequence[int],
    sigma2: float | np.ndarray,
) -> DeconvolutionResult:
    """Estimate states and transition by the nested EM iterations.

    `sigma2` is the per-measurement noise variance; see
    ``SolverConfig.noise_scaling`` for how it enters the objective.

    The start point comes from `gaussian_start`. Estimating theta there
    first avoids the slow EM regime that sets in once reweighting makes most
    innovation variances tiny.
    Each outer step evaluates the smoothed objective; if a theta update
    made it worse, the step is redone with theta held at its previous value,
    which the majorization argument guarantees cannot increase it.
    """
    schedule = np.asarray(schedule, dtype=int)
    if len(schedule) != ensemble.T:
        raise ValueError("schedule length must equal T")
    if len(observations) != ensemble.T:
        raise ValueError("need one observation vector per time step")
    if config.lam is None:
        lam = config.lambda_scale * auto_lambda(
            sigma2, schedule, ensemble.row_counts, ensemble.p, config.noise_scaling
        )
    else:
        lam = config.lam
    sigma2_obs = sigma2
    if config.theta_init is None:
        theta = moment_theta(observations, ensemble, sigma2_obs)
    else:
        theta = config.theta_init
    sigma2 = effective_sigma2(sigma2_obs, ensemble.row_counts, config.noise_scaling)
    params = ModelParams(
        theta=theta,
        sigma2=sigma2,
        lam=lam,
        eps_smooth=config.eps_smooth,
        schedule=schedule,
        row_counts=ensemble.row_counts,
        p=ensemble.p,
    )

    def objective(x, th):
        return smoothed_objective(x, th, ensemble, observations, params)

    # the smallest innovation variance the reweighted surrogate can produce
    q_min = float(np.sqrt(schedule.min()) * config.eps_smooth / lam)
    x, theta, sm = gaussian_start(
        observations, ensemble, theta, sigma2_obs, sigma2, q_min, config
    )
    f = objective(x, theta)
    res = DeconvolutionResult(
        states=x, theta=theta, innovations=None, variances=sm.variances, lam=lam
    )
    res.objective_trace.append(f)
    res.dual_trace.append(dual_objective(x, theta, ensemble, observations, params))
    res.theta_trace.append(theta)

    for it in range(1, config.outer_iters + 1):
        w = outer_weights(x, theta, schedule, config.eps_smooth)
        x_new, theta_new, sm_new = run_inner_em(
            observations, ensemble, w, theta, lam, sigma2, config
        )
        f_new = objective(x_new, theta_new)
        if config.estimate_theta and f_new > f:
            log.debug("iteration %d: theta step raised objective, holding theta", it)
            res.fallbacks += 1
            spec = inner_spec_from_weights(w, lam, theta, ensemble, sigma2)
            sm_new = fixed_interval_smooth(spec, observations, full=False)
            x_new, theta_new = sm_new.means, theta
            f_new = objective(x_new, theta_new)
        rel_f = abs(f - f_new) / max(abs(f), np.finfo(float).tiny)
        rel_x = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), np.finfo(float).tiny)
        x, theta, sm, f = x_new, theta_new, sm_new, f_new
        res.objective_trace.append(f)
        res.dual_trace.append(dual_objective(x, theta, ensemble, observations, params))
        res.theta_trace.append(theta)
        res.iterations = it
        if rel_f < config.tol_objective or rel_x < config.tol_state:
            res.converged = True
            break

    res.states = x
    res.theta = theta
    res.innovations = innovation_sequence(x, theta)
    res.variances = sm.variances
    return res


def confidence_bands(
    result: DeconvolutionResult, level: float = 0.90, tol: float = 1e-8
) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided Gaussian bands ``x_hat +/- z * sqrt(var)`` from the final smoother.

    These come from the last Gaussian surrogate, so they are approximate for
    the l1 problem.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    var = result.variances
    scale = max(float(np.abs(var).max()), 1.0) if var.size else 1.0
    if np.any(var < -tol * scale):
        raise ValueError("smoother returned negative variances")
    z = norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(np.clip(var, 0.0, None))
    return result.states - half, result.states + half
