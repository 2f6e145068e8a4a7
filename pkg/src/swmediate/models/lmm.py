"""Random-intercept linear mixed model fitted by (restricted) maximum likelihood.

The marginal covariance of cluster i is ``sigma2 * (I + lam * 11')`` with
``lam = sigma2_intercept / sigma2``. Its inverse is a rank-one update of the
identity, so the profiled criterion, its derivative in ``lam`` and the GLS
fixed effects are all assembled from per-cluster sufficient statistics.
Leave-one-cluster-out refits reuse the same statistics with a cluster mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from ..exceptions import ConfigurationError, FitError
from .design_matrix import ModelData
from .fitted import FitOptions, FittedModel, VarianceComponents

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LMMStats:
    """Per-cluster sufficient statistics of a linear mixed model."""

    n: np.ndarray  # (I,)
    xsum: np.ndarray  # (I, p)   X_i' 1
    ysum: np.ndarray  # (I,)     1' y_i
    xtx: np.ndarray  # (I, p, p)
    xty: np.ndarray  # (I, p)
    yty: np.ndarray  # (I,)

    @classmethod
    def from_model_data(cls, md: ModelData) -> "LMMStats":
        X, y, cl, I = md.X, md.y, md.cluster, md.n_clusters
        p = X.shape[1]
        n = np.bincount(cl, minlength=I).astype(float)
        xsum = np.zeros((I, p))
        np.add.at(xsum, cl, X)
        ysum = np.bincount(cl, weights=y, minlength=I)
        xtx = np.zeros((I, p, p))
        np.add.at(xtx, cl, X[:, :, None] * X[:, None, :])
        xty = np.zeros((I, p))
        np.add.at(xty, cl, X * y[:, None])
        yty = np.bincount(cl, weights=y * y, minlength=I)
        return cls(n, xsum, ysum, xtx, xty, yty)


class _Profile:
    """Profiled criterion for one cluster subset."""

    def __init__(self, stats: LMMStats, keep: np.ndarray, reml: bool):
        self.n = stats.n[keep]
        self.xsum = stats.xsum[keep]
        self.ysum = stats.ysum[keep]
        self.xtx = stats.xtx[keep].sum(axis=0)
        self.xty = stats.xty[keep].sum(axis=0)
        self.yty = float(stats.yty[keep].sum())
        self.N = float(self.n.sum())
        self.p = self.xtx.shape[0]
        self.reml = reml
        if self.N <= self.p:
            raise FitError(f"{int(self.N)} records cannot identify {self.p} fixed effects")

    def solve(self, lam: float):
        c = lam / (1.0 + self.n * lam)
        A = self.xtx - (self.xsum * c[:, None]).T @ self.xsum
        b = self.xty - (self.xsum * (c * self.ysum)[:, None]).sum(axis=0)
        q = self.yty - float(np.sum(c * self.ysum**2))
        cho = np.linalg.cholesky(A)
        beta = np.linalg.solve(A, b)
        rss = q - float(b @ beta)
        return A, cho, beta, max(rss, 1e-300)

    def criterion(self, lam: float) -> float:
        """-2 x (restricted) log-likelihood with the residual variance profiled out."""
        A, cho, beta, rss = self.solve(lam)
        logdet_h = float(np.sum(np.log1p(self.n * lam)))
        if self.reml:
            dof = self.N - self.p
            logdet_a = 2.0 * float(np.sum(np.log(np.diag(cho))))
            return dof * (1.0 + _LOG2PI + math.log(rss / dof)) + logdet_h + logdet_a
        return self.N * (1.0 + _LOG2PI + math.log(rss / self.N)) + logdet_h

    def gradient(self, lam: float) -> float:
        """d criterion / d lam."""
        A, _, beta, rss = self.solve(lam)
        d = 1.0 / (1.0 + self.n * lam)
        resid_sum = (self.ysum - self.xsum @ beta) * d
        quad = float(np.sum(resid_sum**2))
        if self.reml:
            s = self.xsum * d[:, None]
            tr = float(np.sum(self.n * d)) - float(np.sum(s * np.linalg.solve(A, s.T).T))
            return tr - (self.N - self.p) * quad / rss
        return float(np.sum(self.n * d)) - self.N * quad / rss


def _find_ratio(prof: _Profile, start: float | None, opts: FitOptions):
    """Minimise the profiled criterion over lam >= 0 via a root of its derivative."""
    g0 = prof.gradient(0.0)
    if g0 >= 0.0:
        return 0.0, True, 0
    hi = max(start or 0.0, 0.05) * 2.0
    iters = 0
    while prof.gradient(hi) < 0.0:
        hi *= 4.0
        iters += 1
        if hi > 1e8 or iters > opts.max_iter:
            raise FitError("variance ratio diverged while bracketing the REML optimum")
    lo = 0.0
    lam, res = brentq(prof.gradient, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                      maxiter=opts.max_iter, full_output=True, disp=False)
    return float(lam), False, iters + res.iterations


class PreparedLMM:
    """A linear mixed model ready for repeated fitting on cluster subsets."""

    link = "identity"

    def __init__(self, md: ModelData, options: FitOptions | None = None):
        self.data = md
        self.options = options or FitOptions()
        self.stats = LMMStats.from_model_data(md)

    def fit(self, drop: int | None = None, start: FittedModel | None = None) -> FittedModel:
        I = self.data.n_clusters
        keep = self.stats.n > 0
        if drop is not None:
            keep = keep.copy()
            keep[drop] = False
        if keep.sum() < 2:
            raise ConfigurationError("a random-intercept model needs at least 2 clusters with data")
        opts = self.options
        prof = _Profile(self.stats, keep, opts.reml)
        lam0 = None
        if start is not None and start.variance.residual_sd:
            lam0 = (start.variance.random_intercept_sd / start.variance.residual_sd) ** 2
        try:
            if opts.fixed_random_sd is not None:
                lam, boundary, iters = None, opts.fixed_random_sd == 0.0, 0
            else:
                lam, boundary, iters = _find_ratio(prof, lam0, opts)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular fixed-effects system: {exc}") from exc
        if lam is None:
            # random-intercept sd held fixed: profile the residual variance only
            lam = _ratio_for_fixed_sd(prof, opts.fixed_random_sd)
        A, _, beta, rss = prof.solve(lam)
        dof = prof.N - prof.p if opts.reml else prof.N
        sigma2 = rss / dof
        cov = sigma2 * np.linalg.inv(A)
        crit = prof.criterion(lam)
        return FittedModel(
            layout=self.data.layout,
            coef=beta,
            variance=VarianceComponents(math.sqrt(lam * sigma2), math.sqrt(sigma2)),
            link=self.link,
            converged=True,
            criterion=crit,
            n_used=int(prof.N),
            n_clusters=int(keep.sum()),
            iterations=iters,
            boundary=boundary,
            coef_cov=cov,
        )

    def criterion(self, lam: float, drop: int | None = None) -> float:
        keep = self.stats.n > 0
        if drop is not None:
            keep = keep.copy()
            keep[drop] = False
        return _Profile(self.stats, keep, self.options.reml).criterion(lam)

    def gradient(self, lam: float) -> float:
        return _Profile(self.stats, self.stats.n > 0, self.options.reml).gradient(lam)


def _ratio_for_fixed_sd(prof: _Profile, sd: float) -> float:
    """Variance ratio consistent with a fixed random-intercept sd (fixed point on sigma2)."""
    if sd == 0.0:
        return 0.0
    lam = 1.0
    for _ in range(200):
        A, _, beta, rss = prof.solve(lam)
        dof = prof.N - prof.p if prof.reml else prof.N
        new = sd**2 / (rss / dof)
        if abs(new - lam) <= 1e-13 * max(1.0, lam):
            return new
        lam = new
    return lam


def fit_lmm(md: ModelData, options: FitOptions | None = None) -> FittedModel:
    """Fit a random-intercept linear mixed model (REML by default)."""
    return PreparedLMM(md, options).fit()
