"""Stationary AR(1) covariance machinery.

``sigma2_sq`` is the innovation variance of the process noise; the stationary
marginal variance is sigma2_sq / (1 - rho^2). The precision matrix has the
standard tridiagonal closed form, which keeps the M-step updates cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Ar1Params",
    "ar1_covariance",
    "ar1_precision",
    "ar1_logdet",
    "profile_ml_update",
    "profile_objective",
]

# Keep |rho| away from 1 so the precision matrix cannot degenerate.
STATIONARITY_MARGIN = 1e-6
_RHO_SEARCH_BOUND = 0.99
_SIGMA_FLOOR = 1e-10


@dataclass(frozen=True)
class Ar1Params:
    rho: float
    sigma2_sq: float

    def __post_init__(self):
        if not abs(self.rho) <= 1.0 - STATIONARITY_MARGIN:
            raise ValueError(f"rho must satisfy |rho| <= {1.0 - STATIONARITY_MARGIN}")
        if not self.sigma2_sq > 0:
            raise ValueError("sigma2_sq must be positive")


def ar1_covariance(params: Ar1Params, T: int) -> np.ndarray:
    """Marginal covariance of T consecutive points of the stationary process:
    entry (s, t) = sigma2_sq / (1 - rho^2) * rho^|s-t|."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if abs(params.rho) >= 1.0:
        raise ValueError("stationarity requires |rho| < 1")
    idx = np.arange(T)
    marginal = params.sigma2_sq / (1.0 - params.rho**2)
    return marginal * params.rho ** np.abs(idx[:, None] - idx[None, :])


def ar1_precision(params: Ar1Params, T: int) -> np.ndarray:
    """Tridiagonal inverse of ar1_covariance: (1/sigma2_sq) * B(rho) with
    B diagonal (1, 1+rho^2, ..., 1+rho^2, 1) and off-diagonal -rho."""
    if T < 2:
        raise ValueError("T must be >= 2 for the tridiagonal precision")
    rho = params.rho
    B = np.zeros((T, T))
    d = np.full(T, 1.0 + rho**2)
    d[0] = d[-1] = 1.0
    np.fill_diagonal(B, d)
    off = np.arange(T - 1)
    B[off, off + 1] = -rho
    B[off + 1, off] = -rho
    return B / params.sigma2_sq


def ar1_logdet(params: Ar1Params, T: int) -> float:
    """log det of ar1_covariance: T log(sigma2_sq) - log(1 - rho^2)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return float(T * np.log(params.sigma2_sq) - np.log(1.0 - params.rho**2))


def _tridiag_stats(S2: np.ndarray) -> tuple[float, float, float]:
    """Sufficient statistics of tr(B(rho) S2): (trace, interior diagonal sum,
    first superdiagonal sum), so that
    tr(B(rho) S2) = a0 + rho^2 * a2 - 2 rho * a1."""
    a0 = float(np.trace(S2))
    a2 = float(np.trace(S2)) - float(S2[0, 0]) - float(S2[-1, -1])
    a1 = float(np.trace(S2, offset=1))
    return a0, a2, a1


def profile_objective(S2: np.ndarray, rho: float, sigma2_sq: float) -> float:
    """Expected AR(1) Gaussian log-density term to be maximised in the M-step:
    -1/2 logdet(Sigma2) - 1/2 tr(Sigma2^{-1} S2)."""
    T = S2.shape[0]
    a0, a2, a1 = _tridiag_stats(S2)
    quad = (a0 + rho**2 * a2 - 2.0 * rho * a1) / sigma2_sq
    logdet = T * np.log(sigma2_sq) - np.log(1.0 - rho**2)
    return float(-0.5 * (logdet + quad))


def _profiled(rho: float, a0: float, a2: float, a1: float, T: int) -> float:
    """Objective with sigma2_sq(rho) = tr(B(rho) S2)/T plugged in (constants
    dropped)."""
    tr_bs = a0 + rho**2 * a2 - 2.0 * rho * a1
    if tr_bs <= 0:
        return -np.inf
    return -0.5 * (T * np.log(tr_bs / T) - np.log(1.0 - rho**2))


def _golden_max(f, lo: float, hi: float, tol: float = 1e-7) -> float:
    """Golden-section maximiser of a scalar function on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
    return 0.5 * (a + b)


def profile_ml_update(S2: np.ndarray) -> Ar1Params:
    """Maximise -1/2 logdet(Sigma2) - 1/2 tr(Sigma2^{-1} S2) over (sigma2_sq, rho).

    For fixed rho the optimum is sigma2_sq(rho) = tr(B(rho) S2) / T in closed
    form; rho is then found by golden section on [-0.99, 0.99], with a dense
    grid fallback (step 0.002) whenever a coarse scan shows the golden-section
    result missed the global maximum.
    """
    S2 = np.asarray(S2, dtype=float)
    if S2.ndim != 2 or S2.shape[0] != S2.shape[1]:
        raise ValueError("S2 must be a square matrix")
    T = S2.shape[0]
    if T < 2:
        raise ValueError("profile update needs T >= 2")
    if not np.trace(S2) > 0:
        raise ValueError("degenerate moment: S2 must have positive trace")

    a0, a2, a1 = _tridiag_stats(S2)

    def f(rho: float) -> float:
        return _profiled(rho, a0, a2, a1, T)

    rho_hat = _golden_max(f, -_RHO_SEARCH_BOUND, _RHO_SEARCH_BOUND, tol=1e-7)

    # Unimodality sanity check: a coarse scan must not beat the golden result.
    coarse = np.linspace(-_RHO_SEARCH_BOUND, _RHO_SEARCH_BOUND, 100)
    coarse_vals = np.array([f(r) for r in coarse])
    if coarse_vals.max() > f(rho_hat) + 1e-10:
        dense = np.arange(-_RHO_SEARCH_BOUND, _RHO_SEARCH_BOUND + 1e-12, 0.002)
        dense_vals = np.array([f(r) for r in dense])
        best = float(dense[int(np.argmax(dense_vals))])
        lo = max(-_RHO_SEARCH_BOUND, best - 0.002)
        hi = min(_RHO_SEARCH_BOUND, best + 0.002)
        rho_hat = _golden_max(f, lo, hi, tol=1e-7)

    sigma2_hat = max((a0 + rho_hat**2 * a2 - 2.0 * rho_hat * a1) / T, _SIGMA_FLOOR)
    return Ar1Params(rho=float(rho_hat), sigma2_sq=float(sigma2_hat))
