"""Random-intercept logistic mixed model by adaptive Gauss-Hermite maximum likelihood."""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from ..exceptions import ConfigurationError, FitError, SeparationError
from . import _kernels
from .design_matrix import ModelData
from .fitted import FitOptions, FittedModel, VarianceComponents

_SIGMA_FLOOR = 1e-5
_FTOL = 1e-15  # stop on the projected gradient, not on tiny relative decreases


def hermite_rule(nodes: int):
    """Physicists' Gauss-Hermite nodes and weights (weight function exp(-z^2))."""
    return np.polynomial.hermite.hermgauss(int(nodes))


def collapse_rows(md: ModelData):
    """Merge records sharing a cluster and covariate row into binomial cells.

    Returns (X, trials, successes, offsets) with rows sorted by cluster; the
    Bernoulli log-likelihood is unchanged by the merge.
    """
    keyed = np.column_stack([md.cluster.astype(float), md.X])
    uniq, inverse = np.unique(keyed, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    trials = np.bincount(inverse, minlength=uniq.shape[0]).astype(float)
    succ = np.bincount(inverse, weights=md.y, minlength=uniq.shape[0])
    cl = uniq[:, 0].astype(np.int64)
    offsets = np.searchsorted(cl, np.arange(md.n_clusters + 1)).astype(np.int64)
    return np.ascontiguousarray(uniq[:, 1:]), trials, succ, offsets


def logistic_irls(X, trials, succ, ridge=0.0, beta=None, max_iter=100, tol=1e-12):
    """Ordinary (optionally ridge-penalized) binomial logistic regression by Newton-Raphson."""
    p = X.shape[1]
    beta = np.zeros(p) if beta is None else np.array(beta, dtype=float)
    for _ in range(max_iter):
        eta = X @ beta
        pr = 0.5 * (1.0 + np.tanh(0.5 * eta))
        score = X.T @ (succ - trials * pr) - ridge * beta
        info = (X * (trials * pr * (1 - pr))[:, None]).T @ X + ridge * np.eye(p)
        step = np.linalg.solve(info, score)
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            break
    return beta


class PreparedGLMM:
    """A logistic mixed model ready for repeated fitting on cluster subsets."""

    link = "logit"

    def __init__(self, md: ModelData, options: FitOptions | None = None):
        if md.y.size and not np.all((md.y == 0) | (md.y == 1)):
            raise ConfigurationError("logistic mixed model needs a 0/1 response")
        self.data = md
        self.options = options or FitOptions()
        self.X, self.trials, self.succ, self.offsets = collapse_rows(md)
        self.z, self.w = hermite_rule(self.options.nodes)
        self._sizes = np.diff(self.offsets)

    def keep_mask(self, drop=None):
        keep = self._sizes > 0
        if drop is not None:
            keep = keep.copy()
            keep[drop] = False
        return keep

    def negloglik(self, beta, sigma, drop=None, want_grad=True, nodes=None):
        z, w = (self.z, self.w) if nodes is None else hermite_rule(nodes)
        return _kernels.agq(
            self.X, self.trials, self.succ, self.offsets, self.keep_mask(drop),
            np.asarray(beta, dtype=float), float(sigma), z, w, want_grad,
        )

    def loglik(self, beta, sigma, drop=None, nodes=None) -> float:
        return -self.negloglik(beta, sigma, drop, want_grad=False, nodes=nodes)[0]

    def _rows(self, keep):
        rows = np.repeat(keep, self._sizes)
        return self.X[rows], self.trials[rows], self.succ[rows]

    def fit(self, drop: int | None = None, start: FittedModel | None = None) -> FittedModel:
        opts = self.options
        keep = self.keep_mask(drop)
        if keep.sum() < 2:
            raise ConfigurationError("a random-intercept model needs at least 2 clusters with data")
        X, n, y = self._rows(keep)
        if y.sum() == 0 or y.sum() == n.sum():
            raise SeparationError("response is constant: logistic coefficients are not identified")
        p = X.shape[1]
        if np.linalg.matrix_rank(X) < p:
            raise FitError("design matrix is rank deficient on this cluster subset")

        if start is not None:
            beta0 = np.array(start.coef, dtype=float)
            sigma0 = start.variance.random_intercept_sd
        else:
            beta0 = logistic_irls(X, n, y, ridge=1e-4)
            sigma0 = opts.sigma_start
        fixed = opts.fixed_random_sd
        if fixed == 0.0:
            # no random intercept: ordinary logistic regression, solved exactly
            return self._fit_at_zero(X, n, y, beta0, drop, keep, "random-intercept sd fixed at 0", False)

        if fixed is not None:
            def fun(b):
                f, g = self.negloglik(b, fixed, drop)
                return f, g[:p]

            x0 = beta0
            bounds = self._coef_bounds(p)
        else:
            def fun(theta):
                return self.negloglik(theta[:p], theta[p], drop)

            x0 = np.append(beta0, max(sigma0, 0.05))
            bounds = self._coef_bounds(p) + [(0.0, None)]
        cap = opts.coef_cap
        x0[:p] = np.clip(x0[:p], -cap, cap)

        res = minimize(
            fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": opts.max_iter, "ftol": _FTOL, "gtol": opts.gtol, "maxcor": 20},
        )
        beta = res.x[:p]
        sigma = float(fixed) if fixed is not None else float(res.x[p])
        if fixed is None and sigma < _SIGMA_FLOOR:
            # variance at its boundary: report 0 and refit the fixed effects there
            return self._fit_at_zero(X, n, y, beta, drop, keep, str(res.message), True, int(res.nit))
        nll, grad = self.negloglik(beta, sigma, drop)
        gfree = grad[:p] if fixed is not None else grad
        converged = bool(np.all(np.isfinite(beta))) and (bool(res.success) or float(np.max(np.abs(gfree))) < 1e-3)
        return self._result(beta, sigma, nll, converged, str(res.message), n, keep, int(res.nit), False)

    def _coef_bounds(self, p):
        cap = self.options.coef_cap if self.options.on_separation == "bound" else None
        return [(-cap if cap else None, cap)] * p

    def _fit_at_zero(self, X, n, y, beta, drop, keep, message, boundary, nit=0):
        cap = self.options.coef_cap
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                irls = logistic_irls(X, n, y, beta=np.clip(beta, -cap, cap))
            except np.linalg.LinAlgError:
                irls = np.full_like(beta, np.nan)
        if np.all(np.isfinite(irls)) and np.max(np.abs(irls)) <= cap:
            beta = irls
        elif self.options.on_separation == "bound":
            p = beta.size
            res = minimize(
                lambda b: (lambda fg: (fg[0], fg[1][:p]))(self.negloglik(b, 0.0, drop)),
                np.clip(beta, -cap, cap), jac=True, method="L-BFGS-B", bounds=self._coef_bounds(p),
                options={"maxiter": self.options.max_iter, "ftol": _FTOL, "gtol": self.options.gtol},
            )
            beta = res.x
        else:
            beta = irls
        converged = bool(np.all(np.isfinite(beta)))
        nll = self.negloglik(beta, 0.0, drop, want_grad=False)[0] if converged else np.nan
        return self._result(beta, 0.0, nll, converged, message, n, keep, nit, boundary)

    def _result(self, beta, sigma, nll, converged, message, n, keep, nit, boundary):
        opts = self.options
        separated = ()
        if not np.all(np.isfinite(beta)):
            converged = False
            message = "non-finite coefficients: possible separation"
        elif np.max(np.abs(beta)) >= opts.coef_cap * (1.0 - 1e-9):
            at_cap = np.abs(beta) >= opts.coef_cap * (1.0 - 1e-9)
            separated = tuple(n for n, hit in zip(self.data.layout.names, at_cap) if hit)
            if opts.on_separation == "fail":
                converged = False
                message = f"coefficient magnitude exceeds {opts.coef_cap}: possible separation"
            else:
                message = f"possible separation: {', '.join(separated)} held at +-{opts.coef_cap}"
        return FittedModel(
            layout=self.data.layout,
            coef=np.array(beta),
            variance=VarianceComponents(sigma, None),
            link=self.link,
            converged=converged,
            criterion=-float(nll),
            n_used=int(n.sum()),
            n_clusters=int(keep.sum()),
            iterations=nit,
            boundary=boundary,
            message=message,
            separated=separated,
        )


def fit_logistic_glmm(md: ModelData, options: FitOptions | None = None) -> FittedModel:
    """Fit a random-intercept logistic mixed model by adaptive Gauss-Hermite ML."""
    model = PreparedGLMM(md, options)
    fitted = model.fit()
    if not fitted.converged and "separation" in fitted.message:
        raise SeparationError(fitted.message)
    return fitted
