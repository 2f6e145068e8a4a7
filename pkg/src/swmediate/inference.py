"""Delete-one-cluster jackknife inference and the exposure-time heterogeneity test."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .design import EXPOSURE_TIME, MediationDataset
from .estimands import (
    AnalysisOptions, MediationEstimates, PairModel, evaluate, resolve_profile,
)
from .exceptions import ConfigurationError, FitError, SWMediateError, SeparationError


def n_threads() -> int:
    """Worker cap from SWMEDIATE_THREADS (default 1)."""
    raw = os.environ.get("SWMEDIATE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"SWMEDIATE_THREADS must be an integer, got {raw!r}") from None


def map_ordered(fn, items, threads: int | None = None) -> list:
    """Apply ``fn`` to ``items``; results come back in input order regardless of threading."""
    items = list(items)
    threads = n_threads() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def jackknife_variance(replicates) -> np.ndarray:
    """(I-1)/I * sum_i (xi_{-i} - mean)^2, column-wise; NaN where any replicate is missing."""
    R = np.asarray(replicates, dtype=float)
    if R.ndim == 1:
        R = R[:, None]
    I = R.shape[0]
    dev = R - R.mean(axis=0)
    return (I - 1) / I * np.sum(dev * dev, axis=0)


def jackknife_covariance(replicates) -> np.ndarray:
    R = np.asarray(replicates, dtype=float)
    I = R.shape[0]
    dev = R - R.mean(axis=0)
    return (I - 1) / I * dev.T @ dev


@dataclass(frozen=True)
class JackknifeResult:
    label: tuple  # (level, j, e, measure)
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    df: int
    n_replicates_used: int
    failed_replicates: tuple = ()

    def winzorized(self) -> "JackknifeResult":
        """Interval clipped to [0, 1] (used for mediation proportions on request)."""
        lo = self.ci_lower if math.isnan(self.ci_lower) else min(max(self.ci_lower, 0.0), 1.0)
        hi = self.ci_upper if math.isnan(self.ci_upper) else min(max(self.ci_upper, 0.0), 1.0)
        return JackknifeResult(self.label, self.estimate, self.se, lo, hi, self.df,
                               self.n_replicates_used, self.failed_replicates)


@dataclass
class JackknifeAnalysis:
    """Point estimates, leave-one-out replicate matrices and per-estimand results.

    One entry per integration method; all methods share the same model fits.
    """

    estimates: dict
    replicates: dict
    results: dict
    failed: tuple
    n_clusters: int
    pair: object = None
    diagnostics: list = field(default_factory=list)

    @property
    def methods(self) -> tuple:
        return tuple(self.estimates)

    def result(self, label: tuple, method: str | None = None) -> JackknifeResult:
        method = method or self.methods[0]
        for r in self.results[method]:
            if r.label == tuple(label):
                return r
        raise KeyError(label)

    def table(self, method: str | None = None, winzorize_mp: bool = False) -> list[JackknifeResult]:
        method = method or self.methods[0]
        out = []
        for r in self.results[method]:
            out.append(r.winzorized() if winzorize_mp and r.label[3] == "MP" else r)
        return out


def _summarize(est: MediationEstimates, reps: np.ndarray, failed: tuple, I: int) -> list[JackknifeResult]:
    labels = est.labels()
    point = est.vector()
    used = I - len(failed)
    df = I - 1
    tq = float(stats.t.ppf(0.975, df))
    if failed:
        se = np.full(point.size, math.nan)
    else:
        se = np.sqrt(jackknife_variance(reps))
    out = []
    for k, lab in enumerate(labels):
        s = float(se[k])
        out.append(JackknifeResult(lab, float(point[k]), s, float(point[k] - tq * s),
                                   float(point[k] + tq * s), df, used, failed))
    return out


def _fit_checked(model: PairModel, drop=None, start=None):
    pair = model.fit(drop, start)
    for name, m in (("outcome", pair.outcome), ("mediator", pair.mediator)):
        if not m.converged:
            cls = SeparationError if "separation" in m.message else FitError
            raise cls(f"{name} model did not converge: {m.message}")
    return pair


def jackknife(ds: MediationDataset, options: AnalysisOptions | None = None,
              methods: tuple | None = None, threads: int | None = None) -> JackknifeAnalysis:
    """Full-sample estimates plus delete-one-cluster replicates for every estimand.

    ``methods`` lists integration methods evaluated on the same fits (default:
    ``options.method``). The covariate profile is fixed at its full-sample
    value. A failed replicate is recorded and makes the standard errors missing.
    """
    options = options or AnalysisOptions()
    methods = tuple(methods) if methods else (options.method,)
    I = ds.n_clusters
    if I < 2:
        raise ConfigurationError("the jackknife needs at least 2 clusters")
    model = PairModel(ds, options)
    full = _fit_checked(model)
    profile = resolve_profile(ds, options.profile)
    estimates = {m: evaluate(full, ds.design, profile, m, options.nodes, options.weights) for m in methods}
    rows = ds.analysis_mask()
    has_data = np.bincount(ds.cluster[rows], minlength=I) > 0

    def one(i):
        try:
            # a cluster without analysed records leaves both fits unchanged
            pair = _fit_checked(model, i, full) if has_data[i] else full
            return [evaluate(pair, ds.design, profile, m, options.nodes, options.weights).vector()
                    for m in methods]
        except (SWMediateError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            return f"{type(exc).__name__}: {exc}"

    outcomes = map_ordered(one, range(I), threads)
    failed = tuple((ds.cluster_labels[i], r) for i, r in enumerate(outcomes) if isinstance(r, str))
    replicates, results = {}, {}
    for k, m in enumerate(methods):
        K = estimates[m].vector().size
        R = np.full((I, K), math.nan)
        for i, r in enumerate(outcomes):
            if not isinstance(r, str):
                R[i] = r[k]
        replicates[m] = R
        results[m] = _summarize(estimates[m], R, failed, I)
    return JackknifeAnalysis(estimates, replicates, results, failed, I, full)


@dataclass(frozen=True)
class HeterogeneityTest:
    statistic: float
    df: int
    p_value: float
    contrast_vector_definition: str = "S_e = TE(1|x) - TE(e|x), e = 2..E"
    rank_deficient: bool = False

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value,
                "contrast": self.contrast_vector_definition, "rank_deficient": self.rank_deficient}


def quadratic_test(S, Sigma) -> HeterogeneityTest:
    """S' Sigma^{-1} S against chi-square with len(S) df; pseudo-inverse if Sigma is singular."""
    S = np.atleast_1d(np.asarray(S, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    df = S.size
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(Sigma))):
        return HeterogeneityTest(math.nan, df, math.nan)
    rank = np.linalg.matrix_rank(Sigma)
    deficient = rank < df
    if deficient:
        warnings.warn(f"contrast covariance has rank {rank} < {df}; using a pseudo-inverse",
                      RuntimeWarning, stacklevel=2)
        inv = np.linalg.pinv(Sigma)
    else:
        inv = np.linalg.inv(Sigma)
    stat = max(float(S @ inv @ S), 0.0)
    return HeterogeneityTest(stat, df, float(stats.chi2.sf(stat, df)), rank_deficient=deficient)


def heterogeneity_from_jackknife(analysis: JackknifeAnalysis, method: str | None = None) -> HeterogeneityTest:
    """Test equality of the exposure-specific total effects from a jackknife run."""
    method = method or analysis.methods[0]
    est = analysis.estimates[method]
    if est.structure != EXPOSURE_TIME:
        raise ConfigurationError("the heterogeneity test needs the exposure-time structure")
    E = len(est.per_exposure)
    if E < 2:
        raise ConfigurationError("the heterogeneity test needs at least two exposure times")
    labels = est.labels()
    cols = [labels.index(("exposure", None, e, "TE")) for e in range(1, E + 1)]
    point = est.vector()[cols]
    R = analysis.replicates[method][:, cols]
    S = point[0] - point[1:]
    RS = R[:, :1] - R[:, 1:]
    if analysis.failed:
        return HeterogeneityTest(math.nan, E - 1, math.nan)
    return quadratic_test(S, jackknife_covariance(RS))


def heterogeneity_test(ds: MediationDataset, options: AnalysisOptions | None = None) -> HeterogeneityTest:
    options = options or AnalysisOptions()
    if ds.spec.effect_structure != EXPOSURE_TIME:
        ds = ds.with_spec(ds.spec.with_structure(EXPOSURE_TIME))
    return heterogeneity_from_jackknife(jackknife(ds, options))
