"""Fixed-interval smoothing for the Gaussian inner model.

The inner model at a reweighting step is

    x_t = theta x_{t-1} + w_t,   w_t ~ N(0, diag(q_t))
    y_t = A_t x_t + v_t,         v_t ~ N(0, r_t I)

with ``x_0 = 0`` known exactly. `fixed_interval_smooth` computes posterior
means, covariances and lag-one cross-covariances with a forward Kalman
filter and a Rauch-Tung-Striebel backward pass; `joint_map_oracle` gets the
same moments from a dense solve of the joint posterior and exists for
testing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas, lapack

from dyncs.sensing import MeasurementEnsemble


@dataclass(frozen=True)
class InnerSSMSpec:
    """Gaussian state-space model with diagonal innovation covariances.

    Attributes
    ----------
    theta : float
    q : ndarray, shape (T, p)
        Diagonals of the innovation covariances ``Q_t``; all positive.
    r : ndarray, shape (T,)
        Observation noise variances, ``R_t = r_t I``.
    ensemble : MeasurementEnsemble
    """

    theta: float
    q: np.ndarray
    r: np.ndarray
    ensemble: MeasurementEnsemble

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        if q.shape != (self.ensemble.T, self.ensemble.p) or r.shape != (self.ensemble.T,):
            raise ValueError("q must be (T, p) and r must be (T,)")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(r))):
            raise ValueError("non-finite covariances")
        if np.any(q <= 0) or np.any(r <= 0):
            raise ValueError("innovation and noise variances must be positive")
        if not abs(self.theta) < 1:
            raise ValueError("|theta| must be < 1")

    @property
    def T(self) -> int:
        return self.ensemble.T

    @property
    def p(self) -> int:
        return self.ensemble.p


@dataclass
class FilterResult:
    means: np.ndarray  # (T, p)  x_{t|t}
    covs: np.ndarray  # (T, p, p)  P_{t|t}
    pred_means: np.ndarray  # (T, p)  x_{t|t-1}


@dataclass
class SmootherResult:
    """Smoothed moments.

    ``lag_one[t]`` is ``Cov(x_{t-1}, x_t | y_1..T)``; ``lag_one[0]`` is zero
    because ``x_0`` is fixed. `covs` and `lag_one` are only kept when the
    smoother is asked for full matrices; their diagonals are always kept.
    """

    means: np.ndarray
    variances: np.ndarray
    lag_one_diag: np.ndarray
    filtered: FilterResult
    covs: np.ndarray | None = None
    lag_one: np.ndarray | None = None


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _check_observations(spec: InnerSSMSpec, observations: Sequence[np.ndarray]):
    if len(observations) != spec.T:
        raise ValueError("need one observation vector per time step")
    for t, y in enumerate(observations):
        if np.shape(y) != (spec.ensemble.row_counts[t],):
            raise ValueError(f"observation {t} has shape {np.shape(y)}")
        if not np.all(np.isfinite(y)):
            raise ValueError(f"observation {t} is not finite")


def forward_filter(
    spec: InnerSSMSpec, observations: Sequence[np.ndarray], joseph: bool = False
) -> FilterResult:
    """Kalman filter from the prior ``x_1 ~ N(0, Q_1)``.

    With ``n_t <= p`` the covariance update is ``P - V^T V`` with
    ``V = L^{-1} A P`` and ``L L^T = A P A^T + r I``, or the Joseph form when
    `joseph` is set. Taller measurement blocks go through the equivalent
    p x p information update.
    """
    _check_observations(spec, observations)
    T, p, theta = spec.T, spec.p, spec.theta
    ens = spec.ensemble
    means = np.empty((T, p))
    covs = np.empty((T, p, p))
    pred_means = np.empty((T, p))
    eye = np.eye(p)

    grams = {}  # nested rows repeat, so tall-block Gram matrices are shared
    m = np.zeros(p)
    P = np.diag(spec.q[0])
    for t in range(T):
        pred_means[t] = m
        A, y, r = ens.A(t), observations[t], spec.r[t]
        e = y - A @ m
        if A.shape[0] <= p:
            AP = A @ P
            S = AP @ A.T
            S[np.diag_indices_from(S)] += r
            L = np.linalg.cholesky(S)
            V = sla.solve_triangular(L, AP, lower=True, check_finite=False)
            u = sla.solve_triangular(L, e, lower=True, check_finite=False)
            m = m + V.T @ u
            if joseph:
                Kt = sla.solve_triangular(L.T, V, lower=False, check_finite=False)
                IKA = eye - Kt.T @ A
                P = IKA @ P @ IKA.T + r * (Kt.T @ Kt)
            else:
                P = P - V.T @ V
        else:
            n = A.shape[0]
            if n not in grams:
                grams[n] = A.T @ A
            B = grams[n] / r
            P = np.linalg.solve(eye + P @ B, P)
            m = m + P @ (A.T @ e) / r
        P = _sym(P)
        means[t] = m
        covs[t] = P
        if t + 1 < T:
            m = theta * m
            P = theta**2 * P
            P[np.diag_indices_from(P)] += spec.q[t + 1]
    return FilterResult(means=means, covs=covs, pred_means=pred_means)


def _spd_solve_left(M: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``M^{-1} B`` for symmetric positive definite `M`."""
    c, info = lapack.dpotrf(M, lower=1, clean=0)
    if info == 0:
        inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        return np.linalg.solve(M, B)
    # dsymm reads only the lower triangle written by dpotri
    return blas.dsymm(1.0, inv, B, lower=1)


def fixed_interval_smooth(
    spec: InnerSSMSpec,
    observations: Sequence[np.ndarray],
    full: bool = True,
    joseph: bool = False,
) -> SmootherResult:
    """Rauch-Tung-Striebel smoother with lag-one cross-covariances.

    With smoother gain ``J_t = theta P_{t|t} P_{t+1|t}^{-1}`` the lag-one
    covariance is ``Cov(x_t, x_{t+1} | all) = J_t P_{t+1|T}``.
    """
    filt = forward_filter(spec, observations, joseph=joseph)
    T, p, theta = spec.T, spec.p, spec.theta
    means = filt.means.copy()
    variances = np.empty((T, p))
    lag_diag = np.zeros((T, p))
    covs = np.empty((T, p, p)) if full else None
    lag = np.zeros((T, p, p)) if full else None

    Ps = filt.covs[T - 1].copy()
    variances[T - 1] = np.diag(Ps)
    if full:
        covs[T - 1] = Ps
    for t in range(T - 2, -1, -1):
        Pf = filt.covs[t]
        Pp = theta**2 * Pf
        Pp[np.diag_indices_from(Pp)] += spec.q[t + 1]
        Jt = theta * _spd_solve_left(Pp, Pf)  # J^T
        J = Jt.T
        means[t] = filt.means[t] + J @ (means[t + 1] - theta * filt.means[t])
        cross = J @ Ps  # Cov(x_t, x_{t+1})
        lag_diag[t + 1] = np.diag(cross)
        if full:
            lag[t + 1] = cross
        # J P_{t+1|t} = theta P_{t|t}
        Ps = _sym(Pf + (cross - theta * Pf) @ Jt)
        variances[t] = np.diag(Ps)
        if full:
            covs[t] = Ps
    return SmootherResult(
        means=means,
        variances=variances,
        lag_one_diag=lag_diag,
        filtered=filt,
        covs=covs,
        lag_one=lag,
    )


def joint_precision(spec: InnerSSMSpec, observations: Sequence[np.ndarray]):
    """Dense block-tridiagonal precision and information vector of the posterior."""
    T, p, theta = spec.T, spec.p, spec.theta
    ens = spec.ensemble
    Lam = np.zeros((T * p, T * p))
    h = np.zeros(T * p)
    for t in range(T):
        blk = slice(t * p, (t + 1) * p)
        A = ens.A(t)
        D = A.T @ A / spec.r[t] + np.diag(1.0 / spec.q[t])
        if t + 1 < T:
            D += theta**2 * np.diag(1.0 / spec.q[t + 1])
            nxt = slice((t + 1) * p, (t + 2) * p)
            off = -theta * np.diag(1.0 / spec.q[t + 1])
            Lam[blk, nxt] = off
            Lam[nxt, blk] = off
        Lam[blk, blk] = D
        h[blk] = A.T @ observations[t] / spec.r[t]
    return Lam, h


def joint_map_oracle(
    spec: InnerSSMSpec, observations: Sequence[np.ndarray], max_size: int = 2000
):
    """Posterior moments from a dense solve of the joint Gaussian.

    Returns
    -------
    means : ndarray, shape (T, p)
    covs : ndarray, shape (T, p, p)
        Diagonal blocks of the inverse precision.
    lag_one : ndarray, shape (T, p, p)
        ``lag_one[t]`` is the ``(t-1, t)`` block; ``lag_one[0]`` is zero.
    """
    _check_observations(spec, observations)
    T, p = spec.T, spec.p
    if T * p > max_size:
        raise ValueError(f"p*T = {T * p} exceeds dense limit {max_size}")
    Lam, h = joint_precision(spec, observations)
    try:
        cho = sla.cho_factor(Lam, lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("joint precision is singular") from exc
    means = sla.cho_solve(cho, h).reshape(T, p)
    cov = sla.cho_solve(cho, np.eye(T * p))
    cov = 0.5 * (cov + cov.T)
    covs = np.stack([cov[t * p:(t + 1) * p, t * p:(t + 1) * p] for t in range(T)])
    lag = np.zeros((T, p, p))
    for t in range(1, T):
        lag[t] = cov[(t - 1) * p:t * p, t * p:(t + 1) * p]
    return means, covs, lag
