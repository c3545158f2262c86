"""Balanced-panel layout, incidence designs and the linear predictor.

Row convention (fixed globally): observations are individual-major, i.e. the
row for individual ``i`` (0-based) at time ``t`` (0-based) is ``i * T + t``.
All length-n vectors in the package use this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .families import Family, resolve_family

__all__ = [
    "PanelLayout",
    "DesignMatrices",
    "ModelState",
    "PanelDataset",
    "build_designs",
    "linear_predictor",
]


@dataclass(frozen=True)
class PanelLayout:
    """Dimensions of a balanced panel: N individuals x T times, n = N*T."""

    n_individuals: int
    n_times: int

    def __post_init__(self):
        if self.n_individuals < 1:
            raise ValueError("n_individuals must be >= 1")
        if self.n_times < 2:
            raise ValueError("invalid layout: n_times must be >= 2 (AR(1) needs at least two time points)")

    @property
    def n_obs(self) -> int:
        return self.n_individuals * self.n_times

    @property
    def n_effects(self) -> int:
        """Total random-effect dimension q = N + T."""
        return self.n_individuals + self.n_times

    def individual_index(self) -> np.ndarray:
        """0-based individual of each row, length n."""
        return np.repeat(np.arange(self.n_individuals), self.n_times)

    def time_index(self) -> np.ndarray:
        """0-based time point of each row, length n."""
        return np.tile(np.arange(self.n_times), self.n_individuals)


@dataclass(frozen=True)
class DesignMatrices:
    """Incidence designs: U1 (n x N) individual, U2 (n x T) time, U = [U1 | U2].

    Stored densely; U is 2-sparse per row but the estimation code only uses it
    through matrix products.
    """

    U1: np.ndarray
    U2: np.ndarray
    U: np.ndarray


def build_designs(layout: PanelLayout) -> DesignMatrices:
    """Build the individual/time incidence matrices for a balanced panel.

    U1 places a 1 on the row's individual, U2 on the row's time point; under
    the individual-major row order these are the Kronecker forms
    I_N (x) 1_T and 1_N (x) I_T.
    """
    N, T = layout.n_individuals, layout.n_times
    U1 = np.kron(np.eye(N), np.ones((T, 1)))
    U2 = np.kron(np.ones((N, 1)), np.eye(T))
    return DesignMatrices(U1=U1, U2=U2, U=np.hstack([U1, U2]))


def linear_predictor(X: np.ndarray, U: np.ndarray, beta: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Assemble eta = X beta + U xi, checking dimension agreement."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    beta = np.asarray(beta, dtype=float).ravel()
    xi = np.asarray(xi, dtype=float).ravel()
    if X.shape[0] != U.shape[0]:
        raise ValueError(f"X and U row counts disagree: {X.shape[0]} vs {U.shape[0]}")
    if X.shape[1] != beta.size:
        raise ValueError(f"beta length {beta.size} does not match X columns {X.shape[1]}")
    if U.shape[1] != xi.size:
        raise ValueError(f"xi length {xi.size} does not match U columns {U.shape[1]}")
    return X @ beta + U @ xi


@dataclass
class ModelState:
    """Parameter tuple (beta, sigma1_sq, sigma2_sq, rho) plus current posterior
    moments of the stacked random effect xi = (xi1, xi2)."""

    beta: np.ndarray
    sigma1_sq: float
    sigma2_sq: float
    rho: float
    xi_mean: np.ndarray | None = None
    xi_cov: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float).ravel()
        if not self.sigma1_sq > 0:
            raise ValueError("sigma1_sq must be positive")
        if not self.sigma2_sq > 0:
            raise ValueError("sigma2_sq must be positive")
        if not abs(self.rho) < 1:
            raise ValueError("rho must lie in (-1, 1)")
        if self.xi_mean is not None:
            self.xi_mean = np.asarray(self.xi_mean, dtype=float).ravel()

    def stacked(self) -> np.ndarray:
        """The convergence-criterion vector (beta, sigma1_sq, sigma2_sq, rho)."""
        return np.concatenate([self.beta, [self.sigma1_sq, self.sigma2_sq, self.rho]])

    def validate_posterior(self, sym_tol: float = 1e-10, eig_tol: float = -1e-10) -> None:
        """Check the posterior covariance is symmetric PSD within tolerance."""
        if self.xi_cov is None:
            return
        C = self.xi_cov
        if not np.allclose(C, C.T, atol=sym_tol, rtol=0.0):
            raise ValueError("xi_cov is not symmetric within tolerance")
        if np.linalg.eigvalsh(C).min() < eig_tol:
            raise ValueError("xi_cov has an eigenvalue below tolerance")


@dataclass(frozen=True)
class PanelDataset:
    """Observed responses and covariates on a balanced panel."""

    layout: PanelLayout
    y: np.ndarray
    X: np.ndarray
    family: Family
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float))
        object.__setattr__(self, "family", resolve_family(self.family))
        n = self.layout.n_obs
        if self.y.shape != (n,):
            raise ValueError(f"y has length {self.y.size}, expected n = {n}")
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise ValueError(f"X must be (n x p) with n = {n}, got {self.X.shape}")
        tag = self.family.tag
        if tag == "poisson-log":
            if np.any(self.y < 0) or np.any(self.y != np.floor(self.y)):
                raise ValueError("poisson-log responses must be non-negative integers")
        elif tag == "bernoulli-logit":
            if not np.all(np.isin(self.y, (0.0, 1.0))):
                raise ValueError("bernoulli-logit responses must be in {0, 1}")

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]
