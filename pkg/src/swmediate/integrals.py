"""Logistic-normal expectations by Gauss-Hermite quadrature and Taylor expansion.

``kappa`` (mediator model) and ``lambda`` (outcome model) are the same
object, E[expit(mean + sd * Z)] with Z standard normal, so one evaluator
serves both. ``mu`` is the outcome probability after integrating a normal
mediator and the outcome random intercept.

All evaluators broadcast over array arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit

EPS = 1e-12
DEFAULT_NODES = 64
_SQRT2 = np.sqrt(2.0)
_SQRTPI = np.sqrt(np.pi)


@lru_cache(maxsize=None)
def _rule(nodes: int):
    z, w = np.polynomial.hermite.hermgauss(int(nodes))
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def clamp(p):
    return np.clip(p, EPS, 1.0 - EPS)


@dataclass(frozen=True)
class LogisticNormalQuery:
    linear_predictor_mean: float
    sd: float


@dataclass(frozen=True)
class DoubleIntegralQuery:
    """Inputs of the outcome-by-mediator double integral.

    outcome_part: beta0_j + theta*a + beta_X'x
    mediator_mean: gamma0_j + eta*a* + gamma_X'x
    mediator_sd: sqrt(sigma_tau^2 + sigma_e^2)
    outcome_random_sd: sigma_alpha
    """

    outcome_part: float
    mediator_mean: float
    beta_m: float
    mediator_sd: float
    outcome_random_sd: float


def ghq_logistic_normal(mean, sd, nodes: int = DEFAULT_NODES):
    """E[expit(mean + sd*Z)] by an n-point Gauss-Hermite rule."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    z, w = _rule(nodes)
    vals = expit(mean[..., None] + _SQRT2 * sd[..., None] * z)
    out = vals @ w / _SQRTPI
    out = np.where(sd == 0.0, expit(mean), out)
    return out[()] if out.ndim == 0 else out


def sta_logistic_normal(mean, sd):
    """Second-order Taylor approximation m + (m - 3m^2 + 2m^3) sd^2 / 2 with m = expit(mean)."""
    m = expit(np.asarray(mean, dtype=float))
    sd = np.asarray(sd, dtype=float)
    out = clamp(m + (m - 3 * m**2 + 2 * m**3) * 0.5 * sd**2)
    return out[()] if out.ndim == 0 else out


def mu_double_ghq(outcome_part, mediator_mean, beta_m, mediator_sd, outcome_random_sd,
                  nodes: int = DEFAULT_NODES):
    """Tensor-product Gauss-Hermite value of E_alpha E_m expit(outcome_part + beta_m*m + alpha)."""
    c = np.asarray(outcome_part, dtype=float)
    mbar = np.asarray(mediator_mean, dtype=float)
    bm = np.asarray(beta_m, dtype=float)
    sm = np.asarray(mediator_sd, dtype=float)
    sa = np.asarray(outcome_random_sd, dtype=float)
    c, mbar, bm, sm, sa = np.broadcast_arrays(c, mbar, bm, sm, sa)
    z, w = _rule(nodes)
    m = mbar[..., None] + _SQRT2 * sm[..., None] * z  # (..., Q)
    alpha = _SQRT2 * sa[..., None] * z  # (..., Q)
    lin = c[..., None, None] + (bm[..., None] * m)[..., :, None] + alpha[..., None, :]
    vals = expit(lin)
    out = np.einsum("...st,s,t->...", vals, w, w) / np.pi
    return out[()] if out.ndim == 0 else out


def mu_double_sta(outcome_part, mediator_mean, beta_m, mediator_sd, outcome_random_sd):
    """Double second-order Taylor approximation of the outcome-by-mediator integral.

    Inner step: the expectation over the mediator of a logistic with slope
    ``beta_m`` is approximated as f(alpha) = g(m1) with
    m1 = expit(outcome_part + beta_m*mediator_mean + alpha) and
    g(m) = m + c (m - 3m^2 + 2m^3), c = beta_m^2 mediator_sd^2 / 2.
    Outer step: E_alpha f(alpha) ~ f(0) + sd_alpha^2 f''(0) / 2, using
    dm1/dalpha = m1(1-m1) and d2m1/dalpha2 = m1(1-m1)(1-2m1).
    """
    c0 = np.asarray(outcome_part, dtype=float)
    m1 = expit(c0 + np.asarray(beta_m, dtype=float) * np.asarray(mediator_mean, dtype=float))
    c = 0.5 * np.asarray(beta_m, dtype=float) ** 2 * np.asarray(mediator_sd, dtype=float) ** 2
    sa2 = np.asarray(outcome_random_sd, dtype=float) ** 2
    g0 = m1 + c * (m1 - 3 * m1**2 + 2 * m1**3)
    g1 = 1.0 + c * (1.0 - 6.0 * m1 + 6.0 * m1**2)
    g2 = c * (-6.0 + 12.0 * m1)
    d1 = m1 * (1.0 - m1)
    d2 = d1 * (1.0 - 2.0 * m1)
    f2 = g2 * d1**2 + g1 * d2
    out = clamp(g0 + 0.5 * sa2 * f2)
    return out[()] if out.ndim == 0 else out


def logistic_normal(mean, sd, method: str = "ghq", nodes: int = DEFAULT_NODES):
    """Method switch used by the estimand layer."""
    if method == "ghq":
        return clamp(ghq_logistic_normal(mean, sd, nodes))
    if method == "sta":
        return sta_logistic_normal(mean, sd)
    raise ValueError(f"unknown integration method {method!r}")


def mu_double(outcome_part, mediator_mean, beta_m, mediator_sd, outcome_random_sd,
              method: str = "ghq", nodes: int = DEFAULT_NODES):
    if method == "ghq":
        return clamp(mu_double_ghq(outcome_part, mediator_mean, beta_m, mediator_sd,
                                   outcome_random_sd, nodes))
    if method == "sta":
        return mu_double_sta(outcome_part, mediator_mean, beta_m, mediator_sd, outcome_random_sd)
    raise ValueError(f"unknown integration method {method!r}")
