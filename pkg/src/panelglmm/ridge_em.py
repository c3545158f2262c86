"""L2-penalised EM for the linearised mixed model, with per-iteration GCV.

Outer loop: linearise the GLMM around the current means, select the ridge
parameter by the heteroskedastic GCV criterion, run the penalised E/M steps,
then refresh the working response; repeat until the parameter vector
(beta, sigma1_sq, sigma2_sq, rho) is stable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .ar1 import Ar1Params, ar1_covariance, ar1_precision, profile_ml_update, profile_objective
from .errors import NumericalError
from .families import initial_mean, inverse_link, working_response
from .panel import ModelState, PanelDataset, PanelLayout, build_designs

__all__ = [
    "LinearisedModel",
    "RidgeConfig",
    "FitReport",
    "e_step",
    "m_step_beta",
    "m_step_sigma1",
    "m_step_ar1",
    "hat_matrix",
    "solve_henderson",
    "gcv_select_lambda",
    "expected_penalised_loglik",
    "fit",
]

_VARIANCE_FLOOR = 1e-10
# Working clamp on the linear predictor during iterations (non-identity links);
# exp(30) ~ 1e13 keeps Gamma finite through early unstable sweeps.
_ETA_WORKING_CLAMP = 30.0


@dataclass(frozen=True)
class LinearisedModel:
    """One Schall iteration's linear mixed model z = X beta + U xi + e."""

    z: np.ndarray
    gamma_diag: np.ndarray
    X: np.ndarray
    U: np.ndarray
    layout: PanelLayout

    def __post_init__(self):
        if np.any(self.gamma_diag <= 0):
            raise ValueError("gamma_diag must be strictly positive")


@dataclass(frozen=True)
class RidgeConfig:
    lambda_grid: np.ndarray = field(default_factory=lambda: np.logspace(-4, 4, 50))
    max_outer_iters: int = 500
    tol: float = 1e-6
    em_inner_iters: int = 1

    def __post_init__(self):
        grid = np.asarray(self.lambda_grid, dtype=float).ravel()
        object.__setattr__(self, "lambda_grid", grid)
        if grid.size == 0:
            raise ValueError("lambda_grid must be non-empty")
        if np.any(grid < 0):
            raise ValueError("lambda_grid entries must be non-negative")
        if np.any(np.diff(grid) < 0):
            raise ValueError("lambda_grid must be sorted ascending")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer_iters < 1 or self.em_inner_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class FitReport:
    """Converged estimates plus the full per-iteration record."""

    theta_hat: ModelState
    lambda_path: np.ndarray
    trajectories: np.ndarray  # columns: beta_0..beta_{p-1}, sigma1_sq, sigma2_sq, rho, criterion
    gcv_paths: list[np.ndarray]
    n_iters: int
    termination: str
    n_eta_clamped: int = 0

    def __post_init__(self):
        if len(self.trajectories) != self.n_iters or len(self.lambda_path) != self.n_iters:
            raise ValueError("trajectory length must equal n_iters")


def _chol_factor(A: np.ndarray, context: str):
    """Cholesky factorisation that maps overflow and non-PD failures to
    NumericalError (scipy raises ValueError on infs otherwise)."""
    if not np.all(np.isfinite(A)):
        raise NumericalError(f"non-finite values in {context}")
    try:
        return scipy.linalg.cho_factor(A)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"{context}: {exc}") from exc


def _prior_precision(theta: ModelState, layout: PanelLayout) -> np.ndarray:
    """D^{-1} for D = blockdiag(sigma1_sq I_N, Sigma2(sigma2_sq, rho))."""
    N, T = layout.n_individuals, layout.n_times
    Dinv = np.zeros((N + T, N + T))
    Dinv[:N, :N] = np.eye(N) / theta.sigma1_sq
    Dinv[N:, N:] = ar1_precision(Ar1Params(theta.rho, theta.sigma2_sq), T)
    return Dinv


def _prior_cov(theta: ModelState, layout: PanelLayout) -> np.ndarray:
    N, T = layout.n_individuals, layout.n_times
    D = np.zeros((N + T, N + T))
    D[:N, :N] = theta.sigma1_sq * np.eye(N)
    D[N:, N:] = ar1_covariance(Ar1Params(theta.rho, theta.sigma2_sq), T)
    return D


def _xi_posterior(lin: LinearisedModel, theta: ModelState, need_cov: bool):
    """Gaussian posterior moments of xi | z via the q x q information form
    (Woodbury-equivalent to conditioning on the n x n marginal covariance)."""
    w = 1.0 / lin.gamma_diag
    A = _prior_precision(theta, lin.layout) + (lin.U.T * w) @ lin.U
    rhs = lin.U.T @ (w * (lin.z - lin.X @ theta.beta))
    factor = _chol_factor(A, "posterior solve (covariance not positive definite)")
    mean = scipy.linalg.cho_solve(factor, rhs)
    if not need_cov:
        return mean, None
    cov = scipy.linalg.cho_solve(factor, np.eye(A.shape[0]))
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def e_step(lin: LinearisedModel, theta: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of xi given the working response."""
    return _xi_posterior(lin, theta, need_cov=True)


def m_step_beta(lin: LinearisedModel, xi_mean: np.ndarray, lam: float) -> np.ndarray:
    """Ridge-penalised weighted least squares on the xi-adjusted response."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    w = 1.0 / lin.gamma_diag
    Xw = lin.X * w[:, None]
    G = Xw.T @ lin.X + lam * np.eye(lin.X.shape[1])
    rhs = Xw.T @ (lin.z - lin.U @ xi_mean)
    factor = _chol_factor(G, "singular system in the fixed-effect update (use lambda > 0)")
    return scipy.linalg.cho_solve(factor, rhs)


def m_step_sigma1(xi_mean: np.ndarray, xi_cov: np.ndarray, N: int) -> float:
    """Closed-form update of the individual variance component."""
    m1 = xi_mean[:N]
    s = float(m1 @ m1 + np.trace(xi_cov[:N, :N])) / N
    if s < _VARIANCE_FLOOR:
        warnings.warn("individual variance collapsed; floored at 1e-10", RuntimeWarning, stacklevel=2)
        s = _VARIANCE_FLOOR
    return s


def m_step_ar1(xi_mean: np.ndarray, xi_cov: np.ndarray, T: int) -> Ar1Params:
    """Profile ML update of (sigma2_sq, rho) from the time-block posterior
    second moment S2 = m2 m2' + C22."""
    m2 = xi_mean[-T:]
    S2 = np.outer(m2, m2) + xi_cov[-T:, -T:]
    return profile_ml_update(S2)


def _augmented_system(lin: LinearisedModel, theta: ModelState, lam: float):
    """Factorised ridge-augmented mixed-model system for M = [X | U]."""
    p = lin.X.shape[1]
    M = np.hstack([lin.X, lin.U])
    w = 1.0 / lin.gamma_diag
    Mw = M * w[:, None]
    G = Mw.T @ M
    P = np.zeros_like(G)
    P[:p, :p] = lam * np.eye(p)
    P[p:, p:] = _prior_precision(theta, lin.layout)
    factor = _chol_factor(G + P, "singular augmented system in the hat-matrix solve")
    return M, Mw, G, factor


def solve_henderson(lin: LinearisedModel, theta: ModelState, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Joint (beta_hat, xi_hat) from the ridge-augmented Henderson system."""
    p = lin.X.shape[1]
    M, Mw, _, factor = _augmented_system(lin, theta, lam)
    coef = scipy.linalg.cho_solve(factor, Mw.T @ lin.z)
    return coef[:p], coef[p:]


def hat_matrix(lin: LinearisedModel, theta: ModelState, lam: float) -> np.ndarray:
    """Dense smoother S mapping z to fitted values X beta_hat + U xi_hat."""
    M, Mw, _, factor = _augmented_system(lin, theta, lam)
    return M @ scipy.linalg.cho_solve(factor, Mw.T)


def gcv_select_lambda(
    lin: LinearisedModel, theta: ModelState, grid: np.ndarray
) -> tuple[float, np.ndarray]:
    """Grid argmin of the heteroskedastic GCV criterion.

    GCV(lam) = n^{-1} ||z - S_lam z||^2_{Gamma^{-1}} / [1 - n^{-1} tr(S_lam)]^2.
    Grid points with tr(S_lam) >= n (or a failed factorisation) are recorded
    as +inf; ties are broken toward the larger lambda.
    """
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("lambda grid must be non-empty")
    n = lin.z.size
    p = lin.X.shape[1]
    M = np.hstack([lin.X, lin.U])
    w = 1.0 / lin.gamma_diag
    Mw = M * w[:, None]
    G = Mw.T @ M
    b = Mw.T @ lin.z
    Dinv = _prior_precision(theta, lin.layout)

    if not np.all(np.isfinite(G)) or not np.all(np.isfinite(b)):
        raise NumericalError("non-finite values in the GCV normal equations")

    path = np.empty((grid.size, 2))
    best_lam, best_val = None, np.inf
    for i, lam in enumerate(grid):
        A = G.copy()
        A[:p, :p] += lam * np.eye(p)
        A[p:, p:] += Dinv
        try:
            factor = scipy.linalg.cho_factor(A)
        except scipy.linalg.LinAlgError:
            path[i] = (lam, np.inf)
            continue
        zhat = M @ scipy.linalg.cho_solve(factor, b)
        tr = float(np.trace(scipy.linalg.cho_solve(factor, G)))
        if tr >= n:
            path[i] = (lam, np.inf)
            continue
        resid = lin.z - zhat
        num = float(resid @ (w * resid)) / n
        gcv = num / (1.0 - tr / n) ** 2
        path[i] = (lam, gcv)
        if np.isfinite(gcv) and gcv <= best_val:
            best_lam, best_val = float(lam), gcv
    if best_lam is None:
        raise NumericalError("degenerate GCV: tr(S_lambda) >= n on the whole grid")
    return best_lam, path


def expected_penalised_loglik(
    lin: LinearisedModel,
    theta: ModelState,
    xi_mean: np.ndarray,
    xi_cov: np.ndarray,
    lam: float,
) -> float:
    """Expected complete penalised log-likelihood given posterior moments,
    dropping additive terms free of (beta, sigma1_sq, sigma2_sq, rho).

    This is the EM surrogate the M-step maximises; exposed for diagnostics.
    """
    N, T = lin.layout.n_individuals, lin.layout.n_times
    w = 1.0 / lin.gamma_diag
    resid = lin.z - lin.X @ theta.beta - lin.U @ xi_mean
    quad_data = float(resid @ (w * resid)) + float(np.trace((lin.U.T * w) @ lin.U @ xi_cov))
    m1 = xi_mean[:N]
    ess1 = float(m1 @ m1 + np.trace(xi_cov[:N, :N]))
    m2 = xi_mean[-T:]
    S2 = np.outer(m2, m2) + xi_cov[-T:, -T:]
    return (
        -0.5 * quad_data
        - 0.5 * (N * np.log(theta.sigma1_sq) + ess1 / theta.sigma1_sq)
        + profile_objective(S2, theta.rho, theta.sigma2_sq)
        - 0.5 * lam * float(theta.beta @ theta.beta)
    )


def _working_model(dataset: PanelDataset, mu: np.ndarray, U: np.ndarray, iteration: int) -> LinearisedModel:
    z, gamma = working_response(dataset.y, mu, dataset.family)
    if not np.all(np.isfinite(z)) or not np.all(np.isfinite(gamma)):
        raise NumericalError("non-finite working response", iteration=iteration)
    return LinearisedModel(z=z, gamma_diag=gamma, X=dataset.X, U=U, layout=dataset.layout)


def fit(dataset: PanelDataset, config: RidgeConfig | None = None) -> FitReport:
    """Run the penalised EM until stability of (beta, sigma1_sq, sigma2_sq, rho).

    Raises NumericalError (with the failing iteration and a partial report
    attached) if a solve breaks down or the working response turns non-finite.
    """
    config = config or RidgeConfig()
    layout = dataset.layout
    N, T = layout.n_individuals, layout.n_times
    U = build_designs(layout).U
    identity_link = dataset.family.tag == "gaussian-identity"

    mu = initial_mean(dataset.y, dataset.family)
    lin = _working_model(dataset, mu, U, iteration=0)

    # Neutral start: fixed-ridge WLS for beta with xi = 0; mid-scale variances.
    w = 1.0 / lin.gamma_diag
    Xw = lin.X * w[:, None]
    init_factor = _chol_factor(Xw.T @ lin.X + np.eye(lin.X.shape[1]), "initial ridge solve")
    beta0 = scipy.linalg.cho_solve(init_factor, Xw.T @ lin.z)
    if not np.all(np.isfinite(beta0)):
        raise NumericalError("non-finite initial fixed effects", iteration=0)
    theta = ModelState(beta=beta0, sigma1_sq=0.5, sigma2_sq=0.5, rho=0.0)

    lambda_path: list[float] = []
    gcv_paths: list[np.ndarray] = []
    traj_rows: list[np.ndarray] = []
    n_clamped = 0
    termination = "max-iters"

    n_params = dataset.X.shape[1] + 3

    def _traj_array() -> np.ndarray:
        if not traj_rows:
            return np.empty((0, n_params + 1))
        return np.asarray(traj_rows)

    def _partial_report(theta_now: ModelState) -> FitReport:
        return FitReport(
            theta_hat=theta_now,
            lambda_path=np.asarray(lambda_path),
            trajectories=_traj_array(),
            gcv_paths=gcv_paths,
            n_iters=len(traj_rows),
            termination="numerical-failure",
            n_eta_clamped=n_clamped,
        )

    for t in range(1, config.max_outer_iters + 1):
        try:
            lam, gcv_path = gcv_select_lambda(lin, theta, config.lambda_grid)

            th = theta
            for _ in range(config.em_inner_iters):
                xi_mean, xi_cov = e_step(lin, th)
                beta_new = m_step_beta(lin, xi_mean, lam)
                sigma1_new = m_step_sigma1(xi_mean, xi_cov, N)
                ar_new = m_step_ar1(xi_mean, xi_cov, T)
                th = ModelState(
                    beta=beta_new,
                    sigma1_sq=max(sigma1_new, _VARIANCE_FLOOR),
                    sigma2_sq=max(ar_new.sigma2_sq, _VARIANCE_FLOOR),
                    rho=ar_new.rho,
                )
            theta_new = th
            if not np.all(np.isfinite(theta_new.stacked())):
                raise NumericalError("non-finite parameter update")

            # Updating step: refresh xi at the new parameters, then z and Gamma.
            xi_hat, _ = _xi_posterior(lin, theta_new, need_cov=False)
            eta = dataset.X @ theta_new.beta + U @ xi_hat
            if not identity_link:
                over = np.abs(eta) > _ETA_WORKING_CLAMP
                n_clamped += int(np.count_nonzero(over))
                eta = np.clip(eta, -_ETA_WORKING_CLAMP, _ETA_WORKING_CLAMP)
            mu = inverse_link(eta, dataset.family)
            lin = _working_model(dataset, mu, U, iteration=t)
        except NumericalError as exc:
            if exc.iteration is None:
                raise NumericalError(str(exc), iteration=t, report=_partial_report(theta)) from exc
            exc.report = _partial_report(theta)
            raise

        old, new = theta.stacked(), theta_new.stacked()
        crit = float(np.linalg.norm(new - old) / (np.linalg.norm(old) + 1e-12))
        lambda_path.append(lam)
        gcv_paths.append(gcv_path)
        traj_rows.append(np.concatenate([new, [crit]]))
        theta = theta_new

        if crit < config.tol:
            termination = "converged"
            break

    xi_mean, xi_cov = e_step(lin, theta)
    theta_hat = ModelState(
        beta=theta.beta,
        sigma1_sq=theta.sigma1_sq,
        sigma2_sq=theta.sigma2_sq,
        rho=theta.rho,
        xi_mean=xi_mean,
        xi_cov=xi_cov,
    )
    return FitReport(
        theta_hat=theta_hat,
        lambda_path=np.asarray(lambda_path),
        trajectories=_traj_array(),
        gcv_paths=gcv_paths,
        n_iters=len(traj_rows),
        termination=termination,
        n_eta_clamped=n_clamped,
    )
