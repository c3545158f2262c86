"""Exponential-family/link abstraction and the first-order linearisation.

Supported families: poisson-log, bernoulli-logit, gaussian-identity. The
linearisation turns one GLM step into a heteroskedastic linear model with
working response z and diagonal weight matrix Gamma.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "Family",
    "FAMILY_TAGS",
    "resolve_family",
    "working_response",
    "inverse_link",
    "link",
    "initial_mean",
    "deviance",
]

FAMILY_TAGS = ("poisson-log", "bernoulli-logit", "gaussian-identity")

# exp(eta) overflows float64 just above eta = 709; clamp at +-700 and warn.
_ETA_OVERFLOW = 700.0


@dataclass(frozen=True)
class Family:
    """Distribution/link pair; ``dispersion`` is the known error variance of
    the gaussian-identity family and is ignored by the other two."""

    tag: str
    dispersion: float = 1.0

    def __post_init__(self):
        if self.tag not in FAMILY_TAGS:
            raise ValueError(f"unknown family tag {self.tag!r}; expected one of {FAMILY_TAGS}")
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")


def resolve_family(family) -> Family:
    """Accept a Family or a bare tag string."""
    if isinstance(family, Family):
        return family
    return Family(tag=str(family))


def link(mu: np.ndarray, family: Family) -> np.ndarray:
    """g(mu) for the family's link."""
    mu = np.asarray(mu, dtype=float)
    tag = family.tag
    if tag == "poisson-log":
        return np.log(mu)
    if tag == "bernoulli-logit":
        return np.log(mu) - np.log1p(-mu)
    return mu.copy()


def inverse_link(eta: np.ndarray, family: Family) -> np.ndarray:
    """mu = g^{-1}(eta); clamps |eta| > 700 before exponentiating (with a
    warning) so early iterations cannot overflow."""
    eta = np.asarray(eta, dtype=float)
    tag = family.tag
    if tag == "gaussian-identity":
        return eta.copy()
    if np.any(np.abs(eta) > _ETA_OVERFLOW):
        warnings.warn(
            "linear predictor clamped to +-700 before exponentiation",
            RuntimeWarning,
            stacklevel=2,
        )
        eta = np.clip(eta, -_ETA_OVERFLOW, _ETA_OVERFLOW)
    if tag == "poisson-log":
        return np.exp(eta)
    return expit(eta)


def _check_mean_range(mu: np.ndarray, family: Family) -> None:
    tag = family.tag
    if tag == "poisson-log":
        if np.any(mu <= 0):
            raise ValueError("degenerate mean: poisson-log requires mu > 0")
    elif tag == "bernoulli-logit":
        if np.any(mu <= 0) or np.any(mu >= 1):
            raise ValueError("degenerate mean: bernoulli-logit requires 0 < mu < 1")


def working_response(y: np.ndarray, mu: np.ndarray, family: Family) -> tuple[np.ndarray, np.ndarray]:
    """First-order linearisation of y around mu on the link scale.

    Returns (z, gamma_diag) with z_i = g(mu_i) + (y_i - mu_i) g'(mu_i) and
    gamma_diag_i = [g'(mu_i)]^2 Var(Y_i | xi) evaluated at mu_i.
    """
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if y.shape != mu.shape:
        raise ValueError(f"y and mu lengths disagree: {y.size} vs {mu.size}")
    _check_mean_range(mu, family)
    tag = family.tag
    if tag == "poisson-log":
        # g'(mu) = 1/mu, Var = mu  ->  gamma = 1/mu
        z = np.log(mu) + (y - mu) / mu
        gamma = 1.0 / mu
    elif tag == "bernoulli-logit":
        # g'(mu) = 1/(mu(1-mu)) = Var^{-1}  ->  gamma = 1/(mu(1-mu))
        v = mu * (1.0 - mu)
        z = link(mu, family) + (y - mu) / v
        gamma = 1.0 / v
    else:
        # identity link: the linearisation is exact and z does not depend on mu
        z = y.copy()
        gamma = np.full_like(y, family.dispersion)
    return z, gamma


def initial_mean(y: np.ndarray, family: Family) -> np.ndarray:
    """Mean used for the first linearisation, kept off the boundary."""
    y = np.asarray(y, dtype=float).ravel()
    tag = family.tag
    if tag == "poisson-log":
        return y + 0.5
    if tag == "bernoulli-logit":
        return (y + 0.5) / 2.0
    return y.copy()


def deviance(y: np.ndarray, mu: np.ndarray, family: Family) -> float:
    """Family deviance of observations y at fitted means mu (sum over rows)."""
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    _check_mean_range(mu, family)
    tag = family.tag
    if tag == "poisson-log":
        with np.errstate(divide="ignore", invalid="ignore"):
            ylogy = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.sum(ylogy - (y - mu)))
    if tag == "bernoulli-logit":
        return float(-2.0 * np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))
    return float(np.sum((y - mu) ** 2) / family.dispersion)
