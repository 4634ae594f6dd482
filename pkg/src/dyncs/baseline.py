"""Static basis pursuit denoising, applied independently at every time step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dyncs.sensing import MeasurementEnsemble
from dyncs.solver import default_lambda


@dataclass(frozen=True)
class BPConfig:
    max_iter: int = 20000
    tol: float = 1e-12
    kkt_tol: float = 1e-5

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0 or self.kkt_tol <= 0:
            raise ValueError("BPConfig needs positive tolerances and iterations")


@dataclass
class BPResult:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool
    kkt_residual: float


def soft_threshold(v: np.ndarray, tau: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def bp_objective(A: np.ndarray, y: np.ndarray, x: np.ndarray, lam: float) -> float:
    r = y - A @ x
    return float(lam * np.abs(x).sum() + 0.5 * r @ r)


def kkt_residual(A: np.ndarray, y: np.ndarray, x: np.ndarray, lam: float) -> np.ndarray:
    """Per-coordinate distance of ``-grad`` from ``lam * subdiff |x|``."""
    g = A.T @ (A @ x - y)
    on = x != 0
    res = np.maximum(np.abs(g) - lam, 0.0)
    res[on] = np.abs(g[on] + lam * np.sign(x[on]))
    return res


def basis_pursuit_denoise(
    A: np.ndarray, y: np.ndarray, lam: float, config: BPConfig = BPConfig()
) -> BPResult:
    """Minimize ``lam ||x||_1 + ||y - A x||^2 / 2`` by FISTA.

    Momentum is reset whenever the objective goes up, which keeps the
    iterates monotone. Iteration stops once every coordinate satisfies the
    optimality conditions to ``kkt_tol * lam`` or the relative objective
    change drops below `tol`. If the budget runs out the best iterate is
    returned with ``converged=False``.
    """
    A = np.asarray(A, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam <= 0:
        raise ValueError("lam must be positive")
    n, p = A.shape
    if y.shape != (n,):
        raise ValueError("y does not match A")
    G = A.T @ A
    Aty = A.T @ y
    L = max(np.linalg.eigvalsh(G)[-1], np.finfo(float).tiny)
    x = np.zeros(p)
    z = x.copy()
    t = 1.0
    f = bp_objective(A, y, x, lam)
    for it in range(1, config.max_iter + 1):
        x_new = soft_threshold(z - (G @ z - Aty) / L, lam / L)
        f_new = bp_objective(A, y, x_new, lam)
        if f_new > f:
            # restart from the last accepted point with a plain prox step
            z, t = x, 1.0
            x_new = soft_threshold(x - (G @ x - Aty) / L, lam / L)
            f_new = bp_objective(A, y, x_new, lam)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = x_new + (t - 1.0) / t_new * (x_new - x)
        change = abs(f - f_new) / max(abs(f), np.finfo(float).tiny)
        x, f, t = x_new, f_new, t_new
        kkt = float(kkt_residual(A, y, x, lam).max())
        if kkt <= config.kkt_tol * lam or (change < config.tol and kkt <= 1e2 * config.kkt_tol * lam):
            return BPResult(x, f, it, True, kkt)
    return BPResult(x, f, config.max_iter, False, float(kkt_residual(A, y, x, lam).max()))


def bp_lambda(sigma: float, s_t: int, n_t: int, p: int) -> float:
    """Per-step regularization from the same rule the dynamic solver uses."""
    return default_lambda(sigma, s_t, n_t, p)


def bp_sequence(
    ensemble: MeasurementEnsemble,
    observations: Sequence[np.ndarray],
    lam_bp: float | Sequence[float],
    config: BPConfig = BPConfig(),
) -> np.ndarray:
    """Per-time basis pursuit estimates, shape (T, p)."""
    lams = np.broadcast_to(np.asarray(lam_bp, dtype=float), (ensemble.T,))
    out = np.empty((ensemble.T, ensemble.p))
    for t, y in enumerate(observations):
        out[t] = basis_pursuit_denoise(ensemble.A(t), y, float(lams[t]), config).x
    return out
