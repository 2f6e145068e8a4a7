"""Paired mixed models: linear (REML/ML) and logistic (adaptive Gauss-Hermite ML)."""

from __future__ import annotations

import numpy as np

from ..design import BINARY, MediationDataset
from .design_matrix import MEDIATOR, OUTCOME, ColumnLayout, ModelData, build_design_matrix
from .fitted import FitOptions, FittedModel, FittedModelPair, VarianceComponents
from .glmm import PreparedGLMM, fit_logistic_glmm, logistic_irls
from .lmm import PreparedLMM, fit_lmm

__all__ = [
    "ColumnLayout", "FitOptions", "FittedModel", "FittedModelPair", "ModelData",
    "PreparedGLMM", "PreparedLMM", "VarianceComponents", "build_design_matrix",
    "fit_lmm", "fit_logistic_glmm", "logistic_irls", "loglik_gradient_check",
    "prepare_model", "MEDIATOR", "OUTCOME",
]


def prepare_model(ds: MediationDataset, target: str, options: FitOptions | None = None,
                  covariates=None):
    """Build the design matrix for ``target`` and wrap it in the matching fitter."""
    md = build_design_matrix(ds, target, ds.spec.effect_structure, covariates)
    kind = ds.spec.outcome_kind if target == OUTCOME else ds.spec.mediator_kind
    cls = PreparedGLMM if kind == BINARY else PreparedLMM
    return cls(md, options)


def loglik_gradient_check(model, point=None, h: float = 1e-6) -> float:
    """Largest |analytic - central finite difference| of the fitting criterion's gradient.

    For a linear model the criterion is the profiled (RE)ML deviance as a
    function of the variance ratio; ``point`` is that ratio (default: the
    fitted value). For a logistic model it is the negative marginal
    log-likelihood in (beta, sigma); ``point`` is that vector or a
    FittedModel (default: the fitted optimum).
    """
    if isinstance(model, PreparedLMM):
        if point is None or isinstance(point, FittedModel):
            fitted = point if point is not None else model.fit()
            vc = fitted.variance
            point = (vc.random_intercept_sd / vc.residual_sd) ** 2
        lam = float(point)
        analytic = model.gradient(lam)
        lo = max(lam - h, 0.0)
        numeric = (model.criterion(lam + h) - model.criterion(lo)) / (lam + h - lo)
        return abs(analytic - numeric)

    if point is None or isinstance(point, FittedModel):
        fitted = point if point is not None else model.fit()
        point = np.append(fitted.coef, fitted.variance.random_intercept_sd)
    theta = np.asarray(point, dtype=float)
    p = theta.size - 1
    _, grad = model.negloglik(theta[:p], theta[p])
    worst = 0.0
    for k in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        if k == p and dn[k] < 0.0:
            dn[k] = 0.0
        fu = model.negloglik(up[:p], up[p], want_grad=False)[0]
        fd = model.negloglik(dn[:p], dn[p], want_grad=False)[0]
        worst = max(worst, abs(grad[k] - (fu - fd) / (up[k] - dn[k])))
    return worst
