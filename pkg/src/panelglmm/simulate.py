"""Synthetic balanced panels and the diagnostic studies.

Replicate r of a scenario uses seed ``scenario.seed + r`` so parallel and
serial execution would produce identical tables; everything here runs
serially and is bit-reproducible given the scenario.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .families import Family, resolve_family
from .panel import PanelDataset, PanelLayout
from .ridge_em import FitReport, RidgeConfig, fit

__all__ = [
    "SimScenario",
    "SimLatents",
    "StudyResult",
    "Table",
    "default_beta",
    "draw_ar1_series",
    "generate_panel",
    "run_replicates",
    "convergence_study",
    "mse_study",
    "rho_recovery_study",
]


def default_beta(p: int, scale: float = 0.3) -> np.ndarray:
    """Alternating, tapered coefficients: many redundant covariates with a
    modest total signal, keeping the Poisson predictor desk-scale."""
    signs = np.array([(-1.0) ** j for j in range(p)])
    return scale * signs * np.linspace(1.0, 0.4, p)

# Poisson means above exp(30) are astronomically outside desk scale; reject.
_ETA_REJECT = 30.0


@dataclass(frozen=True)
class Table:
    """A plain tabular result: header plus rows, written as CSV text."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_fmt_cell(v) for v in row])


def _fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


@dataclass(frozen=True)
class SimScenario:
    """Ground truth for one synthetic panel family."""

    layout: PanelLayout
    beta_true: np.ndarray
    sigma1_sq_true: float = 0.5
    sigma2_sq_true: float = 0.5
    rho_true: float = 0.5
    x_correlation: float = 0.5
    family: Family = Family("poisson-log")
    seed: int = 0
    n_replicates: int = 1

    def __post_init__(self):
        object.__setattr__(self, "beta_true", np.asarray(self.beta_true, dtype=float).ravel())
        object.__setattr__(self, "family", resolve_family(self.family))
        if self.sigma1_sq_true < 0 or self.sigma2_sq_true <= 0:
            raise ValueError("variance components must be positive (sigma1_sq_true may be 0)")
        if not abs(self.rho_true) < 1:
            raise ValueError("rho_true must lie in (-1, 1)")
        if not 0 <= self.x_correlation < 1:
            raise ValueError("x_correlation must lie in [0, 1)")
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be >= 1")


@dataclass(frozen=True)
class SimLatents:
    xi1: np.ndarray
    xi2: np.ndarray
    eta: np.ndarray


def draw_ar1_series(rng: np.random.Generator, T: int, sigma2_sq: float, rho: float) -> np.ndarray:
    """Stationary AR(1) path: x_0 ~ N(0, sigma2_sq/(1-rho^2)), then the
    recursion x_{t+1} = rho x_t + nu_t with nu_t ~ N(0, sigma2_sq)."""
    x = np.empty(T)
    x[0] = rng.standard_normal() * np.sqrt(sigma2_sq / (1.0 - rho**2))
    innov = rng.standard_normal(T - 1) * np.sqrt(sigma2_sq)
    for t in range(T - 1):
        x[t + 1] = rho * x[t] + innov[t]
    return x


def generate_panel(scenario: SimScenario) -> tuple[PanelDataset, SimLatents]:
    """Draw one panel: equicorrelated Gaussian covariates, the two random
    effects, and family responses. Deterministic given scenario.seed."""
    layout = scenario.layout
    N, T, n = layout.n_individuals, layout.n_times, layout.n_obs
    p = scenario.beta_true.size
    rng = np.random.default_rng(scenario.seed)

    c = scenario.x_correlation
    shared = rng.standard_normal(n)
    X = np.sqrt(c) * shared[:, None] + np.sqrt(1.0 - c) * rng.standard_normal((n, p))

    xi1 = np.sqrt(scenario.sigma1_sq_true) * rng.standard_normal(N)
    xi2 = draw_ar1_series(rng, T, scenario.sigma2_sq_true, scenario.rho_true)

    eta = X @ scenario.beta_true + np.repeat(xi1, T) + np.tile(xi2, N)
    tag = scenario.family.tag
    if tag == "poisson-log":
        if np.max(eta) > _ETA_REJECT:
            raise ValueError(
                f"scenario rejected: max linear predictor {np.max(eta):.2f} > {_ETA_REJECT} "
                "would overflow the Poisson mean; use a smaller beta_true"
            )
        y = rng.poisson(np.exp(eta)).astype(float)
    elif tag == "bernoulli-logit":
        y = rng.binomial(1, expit(eta)).astype(float)
    else:
        y = eta + np.sqrt(scenario.family.dispersion) * rng.standard_normal(n)

    dataset = PanelDataset(layout=layout, y=y, X=X, family=scenario.family)
    return dataset, SimLatents(xi1=xi1, xi2=xi2, eta=eta)


@dataclass
class StudyResult:
    """Per-replicate estimates/trajectories and aggregate MSEs for one scenario."""

    scenario: SimScenario
    estimates: list[dict] = field(default_factory=list)
    reports: list[FitReport | None] = field(default_factory=list)
    runtimes: list[float] = field(default_factory=list)

    @property
    def mse(self) -> dict[str, float]:
        sc = self.scenario
        truth = {
            "beta": sc.beta_true,
            "sigma1_sq": sc.sigma1_sq_true,
            "sigma2_sq": sc.sigma2_sq_true,
            "rho": sc.rho_true,
        }
        out = {}
        for name, true_val in truth.items():
            devs = []
            for est in self.estimates:
                err = np.asarray(est[name]) - true_val
                devs.append(np.mean(np.square(err)))
            out[name] = float(np.mean(devs))
        return out


def _default_fit_fn(dataset: PanelDataset, config: RidgeConfig):
    report = fit(dataset, config)
    th = report.theta_hat
    est = {
        "beta": th.beta.copy(),
        "sigma1_sq": th.sigma1_sq,
        "sigma2_sq": th.sigma2_sq,
        "rho": th.rho,
    }
    return est, report


def run_replicates(scenario: SimScenario, config: RidgeConfig, fit_fn=None) -> StudyResult:
    """Fit every replicate of the scenario; fit_fn(dataset, config) -> (estimates
    dict, report or None) is a debug hook used by the study tests."""
    fit_fn = fit_fn or _default_fit_fn
    result = StudyResult(scenario=scenario)
    for r in range(scenario.n_replicates):
        rep_scenario = replace(scenario, seed=scenario.seed + r)
        dataset, _ = generate_panel(rep_scenario)
        start = time.perf_counter()
        est, report = fit_fn(dataset, config)
        result.runtimes.append(time.perf_counter() - start)
        result.estimates.append(est)
        result.reports.append(report)
    return result


def convergence_study(scenario: SimScenario, config: RidgeConfig) -> Table:
    """Per-iteration trajectories for every replicate."""
    result = run_replicates(scenario, config)
    p = scenario.beta_true.size
    cols = (
        ["replicate", "iteration", "criterion"]
        + [f"beta_{j}" for j in range(p)]
        + ["sigma1_sq", "sigma2_sq", "rho"]
    )
    rows = []
    for r, report in enumerate(result.reports):
        for it in range(report.n_iters):
            row = report.trajectories[it]
            rows.append((r, it + 1, row[-1], *row[:p], row[p], row[p + 1], row[p + 2]))
    return Table(columns=tuple(cols), rows=tuple(rows))


def mse_study(
    base_scenario: SimScenario,
    T_list,
    config: RidgeConfig,
    fit_fn=None,
) -> Table:
    """MSE of each parameter for every panel length in T_list."""
    rows = []
    for T in T_list:
        layout = PanelLayout(base_scenario.layout.n_individuals, int(T))
        scenario = replace(base_scenario, layout=layout)
        result = run_replicates(scenario, config, fit_fn=fit_fn)
        for name, value in result.mse.items():
            rows.append((int(T), name, value))
    return Table(columns=("n_times", "parameter", "mse"), rows=tuple(rows))


def rho_recovery_study(rho_list, scenario: SimScenario, config: RidgeConfig) -> tuple[Table, Table]:
    """Replicate estimates of rho for each true value, plus quartile summary."""
    est_rows = []
    summary_rows = []
    for rho in rho_list:
        sc = replace(scenario, rho_true=float(rho))
        result = run_replicates(sc, config)
        rho_hats = np.array([e["rho"] for e in result.estimates])
        for r, rh in enumerate(rho_hats):
            est_rows.append((float(rho), r, float(rh)))
        q1, med, q3 = np.percentile(rho_hats, [25, 50, 75])
        summary_rows.append((float(rho), float(q1), float(med), float(q3)))
    estimates = Table(columns=("rho_true", "replicate", "rho_hat"), rows=tuple(est_rows))
    summary = Table(columns=("rho_true", "q1", "median", "q3"), rows=tuple(summary_rows))
    return estimates, summary
