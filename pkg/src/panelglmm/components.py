"""Supervised-component regularised EM for the high-dimensional case.

Components live in the principal space of the standardised covariates:
f = C w with C the principal-component scores of X. Each component trades the
linearised-model likelihood against a structural-relevance score (an l-norm
aggregate of squared covariate correlations), with the mixing weight s tuned
by cross-validation over individuals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .errors import NumericalError
from .families import deviance, initial_mean, inverse_link, working_response
from .panel import ModelState, PanelDataset, PanelLayout, build_designs
from .ridge_em import (
    FitReport,
    LinearisedModel,
    RidgeConfig,
    _chol_factor,
    _xi_posterior,
    _VARIANCE_FLOOR,
    _ETA_WORKING_CLAMP,
    m_step_ar1,
    m_step_sigma1,
)

__all__ = [
    "PrincipalBasis",
    "ComponentSet",
    "principal_basis",
    "structural_relevance",
    "optimize_component",
    "fit_components",
]

_ASCENT_MAX_STEPS = 1000
_EIG_DROP = 1e-10  # relative eigenvalue cutoff for retained components


@dataclass(frozen=True)
class PrincipalBasis:
    """Principal components of the standardised covariates.

    C holds the scores (n x r), ``basis`` the variable loadings (p x r), and
    ``eigvals`` the eigenvalues of Xs'Xs (so C'C = diag(eigvals)). The
    standardisation parameters are kept for out-of-sample prediction.
    """

    C: np.ndarray
    basis: np.ndarray
    r: int
    eigvals: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray

    @property
    def n_obs(self) -> int:
        return self.C.shape[0]

    def standardise(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale


def principal_basis(X: np.ndarray) -> PrincipalBasis:
    """Centre and standardise X, then keep the principal directions whose
    eigenvalue exceeds 1e-10 times the largest."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be a matrix")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    bad = np.where(scale <= 0)[0]
    if bad.size:
        raise ValueError(f"cannot standardise X: column {bad[0]} has zero variance")
    Xs = (X - mean) / scale
    Q, sv, Vt = np.linalg.svd(Xs, full_matrices=False)
    keep = sv > np.sqrt(_EIG_DROP) * sv[0]
    Q, sv, Vt = Q[:, keep], sv[keep], Vt[keep]
    return PrincipalBasis(
        C=Q * sv,
        basis=Vt.T,
        r=int(sv.size),
        eigvals=sv**2,
        x_mean=mean,
        x_scale=scale,
    )


@dataclass(frozen=True)
class ComponentSet:
    """Extracted components: loadings W (r x K), scores F = C W (n x K),
    the tuning pair (s, l) and the score regression coefficients."""

    W: np.ndarray
    F: np.ndarray
    s: float
    l: float
    gamma_coefs: np.ndarray

    def variable_loadings(self, basis: PrincipalBasis) -> np.ndarray:
        """Loadings mapped back to the original (standardised) variables, p x K."""
        return basis.basis @ self.W


def structural_relevance(w: np.ndarray, basis: PrincipalBasis, X: np.ndarray, l: float) -> float:
    """l-norm aggregate of squared correlations between each covariate column
    and the component f = C w. Scale-free in w."""
    if l < 1:
        raise ValueError("l must be >= 1")
    w = np.asarray(w, dtype=float).ravel()
    f = basis.C @ w
    fnorm = np.linalg.norm(f)
    if fnorm <= 1e-12 * max(1.0, np.linalg.norm(w)):
        raise ValueError("degenerate component: f = C w is (numerically) zero")
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    col_norms = np.linalg.norm(Xc, axis=0)
    if np.any(col_norms <= 0):
        raise ValueError("cannot correlate against a zero-variance column")
    cor = (Xc.T @ f) / (col_norms * fnorm)
    return _lnorm_aggregate(cor**2, l)


def _lnorm_aggregate(csq: np.ndarray, l: float) -> float:
    """(sum c^l)^(1/l) computed stably for large l."""
    cmax = float(np.max(csq))
    if cmax <= 0:
        return 0.0
    return cmax * float(np.sum((csq / cmax) ** l)) ** (1.0 / l)


class _ComponentObjective:
    """Q_reg(w) restricted to its w-dependent part, with gamma profiled out.

    Likelihood part: (1-s)/2 * (f'G r0)^2 / (f'G f) with G = Gamma^{-1} and
    r0 the xi-adjusted working response. Relevance part: s * phi(w) with
    squared correlations computed in the principal space (exact since
    Xs' C = basis * eigvals).
    """

    def __init__(self, lin: LinearisedModel, basis: PrincipalBasis, r0: np.ndarray, s: float, l: float):
        w_diag = 1.0 / lin.gamma_diag
        C = basis.C
        self.A = (C.T * w_diag) @ C
        self.b = C.T @ (w_diag * r0)
        self.eigvals = basis.eigvals
        self.cross = basis.basis * basis.eigvals[None, :]  # p x r, equals Xs'C
        self.n = basis.n_obs
        self.s = float(s)
        self.l = float(l)

    def _csq(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        t = self.cross @ w
        m = float(np.sum(self.eigvals * w**2))
        return t**2 / (self.n * m), t, m

    def relevance(self, w: np.ndarray) -> float:
        csq, _, _ = self._csq(w)
        return _lnorm_aggregate(csq, self.l)

    def value(self, w: np.ndarray) -> float:
        out = 0.0
        if self.s < 1.0:
            u = float(self.b @ w)
            v = float(w @ self.A @ w)
            out += (1.0 - self.s) * 0.5 * u**2 / v
        if self.s > 0.0:
            out += self.s * self.relevance(w)
        return out

    def gradient(self, w: np.ndarray) -> np.ndarray:
        g = np.zeros_like(w)
        if self.s < 1.0:
            u = float(self.b @ w)
            Aw = self.A @ w
            v = float(w @ Aw)
            g += (1.0 - self.s) * ((u / v) * self.b - (u / v) ** 2 * Aw)
        if self.s > 0.0:
            csq, t, m = self._csq(w)
            cmax = float(np.max(csq))
            chat = csq / cmax
            S_l = float(np.sum(chat**self.l))
            Ew = self.eigvals * w
            inner = (2.0 / (self.n * m)) * (self.cross.T @ (chat ** (self.l - 1.0) * t))
            inner -= (2.0 * cmax * S_l / m) * Ew
            g += self.s * S_l ** ((1.0 - self.l) / self.l) * inner
        return g


def _constraint_projector(basis: PrincipalBasis, prior_components: np.ndarray | None):
    """Orthonormal basis of the loading-space constraints (C w) ' f_j = 0."""
    if prior_components is None or prior_components.size == 0:
        return None
    F_prev = np.atleast_2d(np.asarray(prior_components, dtype=float))
    if F_prev.shape[0] != basis.C.shape[0]:
        F_prev = F_prev.T
    A = basis.C.T @ F_prev  # r x (k-1)
    Qc, _ = np.linalg.qr(A)
    return Qc


def _project(w: np.ndarray, Qc: np.ndarray | None) -> np.ndarray:
    if Qc is None:
        return w
    return w - Qc @ (Qc.T @ w)


def optimize_component(
    lin: LinearisedModel,
    basis: PrincipalBasis,
    theta: ModelState,
    s: float,
    l: float,
    prior_components: np.ndarray | None = None,
    objective_trace: list | None = None,
) -> tuple[np.ndarray, float]:
    """Projected-gradient ascent of Q_reg over the unit sphere with score
    orthogonality against prior components; gamma is profiled out by weighted
    least squares at each w. Returns the sign-fixed unit loading and gamma.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if l < 1:
        raise ValueError("l must be >= 1")
    if theta.xi_mean is None:
        raise ValueError("theta must carry the posterior mean xi_mean")
    r0 = lin.z - lin.U @ theta.xi_mean
    obj = _ComponentObjective(lin, basis, r0, s, l)
    Qc = _constraint_projector(basis, prior_components)

    starts = _ascent_starts(obj, Qc, basis.r)
    best_w, best_val, best_trace = None, -np.inf, None
    for w0 in starts:
        w, val, trace = _ascend(obj, w0, Qc)
        if val > best_val:
            best_w, best_val, best_trace = w, val, trace
    if best_w is None:
        raise NumericalError("no feasible starting loading for the component ascent")
    if objective_trace is not None:
        objective_trace.extend(best_trace)

    # Sign convention: largest-magnitude loading entry is positive.
    imax = int(np.argmax(np.abs(best_w)))
    if best_w[imax] < 0:
        best_w = -best_w
    u = float(obj.b @ best_w)
    v = float(best_w @ obj.A @ best_w)
    return best_w, u / v


def _ascent_starts(obj: _ComponentObjective, Qc, r: int) -> list[np.ndarray]:
    candidates = []
    try:
        ridge = 1e-10 * np.trace(obj.A) / r
        candidates.append(np.linalg.solve(obj.A + ridge * np.eye(r), obj.b))
    except np.linalg.LinAlgError:
        pass
    candidates.append(np.eye(r)[:, 0])
    if r > 1:
        candidates.append(np.eye(r)[:, 1])
    starts = []
    for c in candidates:
        w = _project(c, Qc)
        nrm = np.linalg.norm(w)
        if nrm > 1e-10:
            starts.append(w / nrm)
    if not starts and Qc is not None:
        ns = scipy.linalg.null_space(Qc.T)
        if ns.shape[1]:
            starts.append(ns[:, 0])
    return starts


def _ascend(obj: _ComponentObjective, w: np.ndarray, Qc) -> tuple[np.ndarray, float, list[float]]:
    val = obj.value(w)
    trace = [val]
    step = 1.0
    for it in range(_ASCENT_MAX_STEPS):
        g = _project(obj.gradient(w), Qc)
        g = g - (g @ w) * w
        gnorm = np.linalg.norm(g)
        if gnorm < 1e-12:
            return w, val, trace
        improved = False
        for _ in range(60):
            cand = w + step * g
            cand /= np.linalg.norm(cand)
            cand_val = obj.value(cand)
            if cand_val > val:
                w, val = cand, cand_val
                trace.append(val)
                step = min(step * 1.5, 1e6)
                improved = True
                break
            step *= 0.5
        if not improved:
            return w, val, trace
        if len(trace) >= 2 and trace[-1] - trace[-2] < 1e-12 * (1.0 + abs(val)):
            return w, val, trace
    raise NumericalError(f"component ascent failed to converge after {_ASCENT_MAX_STEPS} steps")


def _component_em(
    dataset: PanelDataset,
    basis: PrincipalBasis,
    K: int,
    s: float,
    l: float,
    config: RidgeConfig,
) -> tuple[ComponentSet, FitReport, np.ndarray]:
    """EM loop with the fixed-effect M-step replaced by component extraction.

    Convergence is measured on the induced standardised-scale coefficient
    vector basis @ (W gamma), which is invariant to loading sign flips.
    """
    layout = dataset.layout
    N, T = layout.n_individuals, layout.n_times
    U = build_designs(layout).U
    C = basis.C
    identity_link = dataset.family.tag == "gaussian-identity"

    mu = initial_mean(dataset.y, dataset.family)
    z, gamma_diag = working_response(dataset.y, mu, dataset.family)
    W = np.eye(basis.r)[:, :K].copy()
    F = C @ W
    gamma_coefs = _wls(F, gamma_diag, z)
    sigma1_sq, sigma2_sq, rho = 0.5, 0.5, 0.0
    b_eff = basis.basis @ (W @ gamma_coefs)
    stacked_prev = np.concatenate([b_eff, [sigma1_sq, sigma2_sq, rho]])

    traj_rows: list[np.ndarray] = []
    termination = "max-iters"
    xi_mean = np.zeros(N + T)
    xi_cov = np.eye(N + T)

    for t in range(1, config.max_outer_iters + 1):
        lin = LinearisedModel(z=z, gamma_diag=gamma_diag, X=F, U=U, layout=layout)
        state = ModelState(beta=gamma_coefs, sigma1_sq=sigma1_sq, sigma2_sq=sigma2_sq, rho=rho)
        try:
            xi_mean, xi_cov = _xi_posterior(lin, state, need_cov=True)
            state = replace(state, xi_mean=xi_mean, xi_cov=xi_cov)
            for k in range(K):
                prior = F[:, :k] if k else None
                w_k, _ = optimize_component(lin, basis, state, s, l, prior)
                W[:, k] = w_k
                F[:, k] = C @ w_k
            r0 = z - U @ xi_mean
            gamma_coefs = _wls(F, gamma_diag, r0)
            sigma1_sq = max(m_step_sigma1(xi_mean, xi_cov, N), _VARIANCE_FLOOR)
            ar_new = m_step_ar1(xi_mean, xi_cov, T)
            sigma2_sq, rho = max(ar_new.sigma2_sq, _VARIANCE_FLOOR), ar_new.rho

            state_new = ModelState(beta=gamma_coefs, sigma1_sq=sigma1_sq, sigma2_sq=sigma2_sq, rho=rho)
            xi_hat, _ = _xi_posterior(
                LinearisedModel(z=z, gamma_diag=gamma_diag, X=F, U=U, layout=layout),
                state_new,
                need_cov=False,
            )
            eta = F @ gamma_coefs + U @ xi_hat
            if not identity_link:
                eta = np.clip(eta, -_ETA_WORKING_CLAMP, _ETA_WORKING_CLAMP)
            mu = inverse_link(eta, dataset.family)
            z, gamma_diag = working_response(dataset.y, mu, dataset.family)
            if not np.all(np.isfinite(z)) or not np.all(np.isfinite(gamma_diag)):
                raise NumericalError("non-finite working response")
        except NumericalError as exc:
            if exc.iteration is None:
                raise NumericalError(str(exc), iteration=t) from exc
            raise

        b_eff = basis.basis @ (W @ gamma_coefs)
        stacked_new = np.concatenate([b_eff, [sigma1_sq, sigma2_sq, rho]])
        crit = float(np.linalg.norm(stacked_new - stacked_prev) / (np.linalg.norm(stacked_prev) + 1e-12))
        traj_rows.append(np.concatenate([stacked_new, [crit]]))
        stacked_prev = stacked_new

        if crit < config.tol:
            termination = "converged"
            break

    theta_hat = ModelState(
        beta=b_eff,
        sigma1_sq=sigma1_sq,
        sigma2_sq=sigma2_sq,
        rho=rho,
        xi_mean=xi_mean,
        xi_cov=xi_cov,
    )
    n_iters = len(traj_rows)
    report = FitReport(
        theta_hat=theta_hat,
        lambda_path=np.full(n_iters, np.nan),
        trajectories=np.asarray(traj_rows),
        gcv_paths=[],
        n_iters=n_iters,
        termination=termination,
    )
    comps = ComponentSet(W=W.copy(), F=F.copy(), s=float(s), l=float(l), gamma_coefs=gamma_coefs.copy())
    return comps, report, b_eff


def _wls(F: np.ndarray, gamma_diag: np.ndarray, target: np.ndarray) -> np.ndarray:
    w = 1.0 / gamma_diag
    Fw = F * w[:, None]
    factor = _chol_factor(Fw.T @ F, "singular component regression")
    return scipy.linalg.cho_solve(factor, Fw.T @ target)


def _individual_folds(N: int, cv_folds: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N)
    return [np.sort(part) for part in np.array_split(perm, cv_folds)]


def _subset_rows(layout: PanelLayout, individuals: np.ndarray) -> np.ndarray:
    T = layout.n_times
    return np.concatenate([np.arange(i * T, (i + 1) * T) for i in individuals])


def fit_components(
    dataset: PanelDataset,
    K: int,
    s_grid,
    l_grid,
    cv_folds: int,
    config: RidgeConfig | None = None,
    seed: int = 0,
) -> tuple[ComponentSet, FitReport]:
    """Tune (s, l) by deviance on held-out individuals, then refit on all data.

    Held-out predictions set the random effects to their population mean
    (zero) since held-out individuals have no estimated level.
    """
    config = config or RidgeConfig()
    layout = dataset.layout
    N = layout.n_individuals
    s_grid = [float(s) for s in s_grid]
    l_grid = [float(l) for l in l_grid]
    if not s_grid or not l_grid:
        raise ValueError("s_grid and l_grid must be non-empty")
    if not 2 <= cv_folds <= N:
        raise ValueError("cv_folds must lie in [2, n_individuals]")
    full_basis = principal_basis(dataset.X)
    if not 1 <= K <= full_basis.r:
        raise ValueError(f"K must lie in [1, rank] = [1, {full_basis.r}]")

    folds = _individual_folds(N, cv_folds, seed)
    best_pair, best_dev = None, np.inf
    for s in s_grid:
        for l in l_grid:
            dev = 0.0
            for held in folds:
                train = np.setdiff1d(np.arange(N), held)
                rows_tr = _subset_rows(layout, train)
                rows_ho = _subset_rows(layout, held)
                ds_tr = PanelDataset(
                    layout=PanelLayout(train.size, layout.n_times),
                    y=dataset.y[rows_tr],
                    X=dataset.X[rows_tr],
                    family=dataset.family,
                )
                basis_tr = principal_basis(ds_tr.X)
                k_fold = min(K, basis_tr.r)
                _, _, b_eff = _component_em(ds_tr, basis_tr, k_fold, s, l, config)
                eta_ho = basis_tr.standardise(dataset.X[rows_ho]) @ b_eff
                eta_ho = np.clip(eta_ho, -_ETA_WORKING_CLAMP, _ETA_WORKING_CLAMP)
                mu_ho = inverse_link(eta_ho, dataset.family)
                dev += deviance(dataset.y[rows_ho], mu_ho, dataset.family)
            if dev < best_dev:
                best_pair, best_dev = (s, l), dev

    s_best, l_best = best_pair
    comps, report, _ = _component_em(dataset, full_basis, K, s_best, l_best, config)
    return comps, report
