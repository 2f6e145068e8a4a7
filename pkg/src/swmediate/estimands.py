"""Natural indirect/direct effects, total effect and mediation proportion.

Effects are contrasts on the link scale of the outcome model (identity for a
continuous outcome, logit for a binary one), evaluated at a fixed covariate
profile and marginal over the cluster random intercepts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logit

from .design import BINARY, CONSTANT, EXPOSURE_TIME, MediationDataset, TrialDesign
from .exceptions import (
    ConfigurationError, DomainError, FitError, NumericDegeneracyError, SeparationError,
)
from .integrals import DEFAULT_NODES, EPS, logistic_normal, mu_double
from .models import FitOptions, FittedModelPair, MEDIATOR, OUTCOME, prepare_model

MEASURES = ("NIE", "NDE", "TE", "MP")
TE_ZERO = 1e-8


@dataclass(frozen=True)
class Effects:
    nie: float
    nde: float
    te: float
    mp: float
    mp_undefined: bool = False
    mp_ratio: float | None = None  # sum(w*NIE)/sum(w*TE), reported for summaries

    @classmethod
    def from_parts(cls, nie: float, nde: float) -> "Effects":
        te = nie + nde
        if abs(te) < TE_ZERO:
            return cls(nie, nde, te, math.nan, True)
        return cls(nie, nde, te, nie / te)

    def as_tuple(self):
        return (self.nie, self.nde, self.te, self.mp)


@dataclass(frozen=True)
class CovariateProfile:
    names: tuple
    x: np.ndarray
    provenance: str = "user"

    def value(self, name: str) -> float:
        return float(self.x[self.names.index(name)])

    def to_dict(self) -> dict:
        return {"provenance": self.provenance, "x": dict(zip(self.names, map(float, self.x)))}


def median_profile(ds: MediationDataset) -> CovariateProfile:
    """Component-wise median over analysed rows; 0/1 covariates use the mode, ties to 0."""
    rows = ds.analysis_mask()
    X = ds.covariates[rows]
    vals = []
    for k in range(X.shape[1]):
        col = X[:, k]
        if np.all((col == 0) | (col == 1)):
            vals.append(1.0 if col.sum() > col.size / 2 else 0.0)
        else:
            vals.append(float(np.median(col)))
    return CovariateProfile(ds.covariate_names, np.array(vals, dtype=float), "median")


@dataclass(frozen=True)
class ModelParameters:
    """Coefficients the estimand expressions need, unpacked from a model pair."""

    outcome_kind: str
    mediator_kind: str
    beta0: np.ndarray
    theta: np.ndarray
    beta_m: float
    outcome_x: float
    sigma_alpha: float
    gamma0: np.ndarray
    eta: np.ndarray
    mediator_x: float
    sigma_tau: float
    sigma_e: float

    @classmethod
    def from_pair(cls, pair: FittedModelPair, profile: CovariateProfile | None) -> "ModelParameters":
        def lin(model):
            names = model.layout.covariate_names
            if not names:
                return 0.0
            if profile is None:
                raise ConfigurationError("a covariate profile is required for models with covariates")
            x = np.array([profile.value(n) for n in names])
            return float(model.covariate_coefs @ x)

        out, med = pair.outcome, pair.mediator
        return cls(
            pair.spec.outcome_kind, pair.spec.mediator_kind,
            out.period_effects.copy(), out.treatment.copy(), out.mediator_coef, lin(out),
            out.variance.random_intercept_sd,
            med.period_effects.copy(), med.treatment.copy(), lin(med),
            med.variance.random_intercept_sd, med.variance.residual_sd or 0.0,
        )


def _checked_logit(p, where):
    p = np.asarray(p, dtype=float)
    bad = (p <= EPS) | (p >= 1.0 - EPS) | ~np.isfinite(p)
    if np.any(bad):
        k = int(np.flatnonzero(np.ravel(bad))[0])
        raise NumericDegeneracyError(f"probability collapsed to 0/1 at {where[k]}")
    return logit(p)


def cell_effects(par: ModelParameters, j, theta, eta, method="ghq", nodes=DEFAULT_NODES, where=None):
    """Vectorized (NIE, NDE) for calendar periods ``j`` (1-based) with treatment effects theta/eta."""
    j = np.atleast_1d(np.asarray(j, dtype=np.int64))
    theta = np.broadcast_to(np.asarray(theta, dtype=float), j.shape)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), j.shape)
    where = where if where is not None else [f"period {int(v)}" for v in j]
    b0 = par.beta0[j - 1] + par.outcome_x
    g0 = par.gamma0[j - 1] + par.mediator_x
    bm = par.beta_m
    code = (par.outcome_kind == BINARY, par.mediator_kind == BINARY)
    if code == (False, False):
        nie = bm * eta
        nde = theta.copy()
    elif code == (False, True):
        k1 = logistic_normal(g0 + eta, par.sigma_tau, method, nodes)
        k0 = logistic_normal(g0, par.sigma_tau, method, nodes)
        nie = bm * (k1 - k0)
        nde = theta.copy()
    elif code == (True, False):
        sd_m = math.hypot(par.sigma_tau, par.sigma_e)

        def mu(a, a_star):
            return mu_double(b0 + theta * a, g0 + eta * a_star, bm, sd_m, par.sigma_alpha, method, nodes)

        l11, l10, l00 = (_checked_logit(mu(1, 1), where), _checked_logit(mu(1, 0), where),
                         _checked_logit(mu(0, 0), where))
        nie, nde = l11 - l10, l10 - l00
    else:
        def lam(a, a_star):
            return logistic_normal(b0 + theta * a + bm * a_star, par.sigma_alpha, method, nodes)

        k1 = logistic_normal(g0 + eta, par.sigma_tau, method, nodes)
        k0 = logistic_normal(g0, par.sigma_tau, method, nodes)
        l10, l11, l00, l01 = lam(1, 0), lam(1, 1), lam(0, 0), lam(0, 1)
        p11 = l10 * (1 - k1) + l11 * k1
        p10 = l10 * (1 - k0) + l11 * k0
        p00 = l00 * (1 - k0) + l01 * k0
        g11, g10, g00 = (_checked_logit(p11, where), _checked_logit(p10, where),
                         _checked_logit(p00, where))
        nie, nde = g11 - g10, g10 - g00
    return np.asarray(nie, dtype=float), np.asarray(nde, dtype=float)


def nie_nde_constant(pair: FittedModelPair, j: int, profile: CovariateProfile | None = None,
                     method: str = "ghq", nodes: int = DEFAULT_NODES):
    """Period-specific (NIE(j|x), NDE(j|x)) under the constant-effect models."""
    par = ModelParameters.from_pair(pair, profile)
    if par.theta.size != 1:
        raise ConfigurationError("pair was fitted with the exposure-time structure")
    if not 1 <= j <= par.beta0.size:
        raise DomainError(f"period {j} outside 1..{par.beta0.size}")
    nie, nde = cell_effects(par, [j], par.theta[0], par.eta[0], method, nodes)
    return float(nie[0]), float(nde[0])


def nie_nde_exposure(pair: FittedModelPair, j: int, e: int, profile: CovariateProfile | None = None,
                     method: str = "ghq", nodes: int = DEFAULT_NODES, design: TrialDesign | None = None):
    """(NIE(j,e|x), NDE(j,e|x)) under the exposure-time models."""
    par = ModelParameters.from_pair(pair, profile)
    E = par.theta.size
    if e < 1 or e > E:
        raise DomainError(f"exposure time e={e} outside 1..{E}")
    if design is not None:
        if j not in set(design.eligible_periods(e).tolist()):
            raise DomainError(f"period {j} is not eligible for exposure time e={e}")
    elif not e <= j - 1:
        raise DomainError(f"exposure time e={e} is impossible in period {j}")
    nie, nde = cell_effects(par, [j], par.theta[e - 1], par.eta[e - 1], method, nodes,
                            where=[f"period {j}, exposure {e}"])
    return float(nie[0]), float(nde[0])


def _share_weighted_mp(effects: list[Effects]) -> tuple[float, bool]:
    """sum_j [TE_j / sum_l TE_l] * MP_j; a term with TE_j = 0 contributes NIE_j / sum TE."""
    total = sum(x.te for x in effects)
    if abs(total) < TE_ZERO:
        return math.nan, True
    acc = 0.0
    for x in effects:
        acc += (x.te / total) * x.mp if not x.mp_undefined else x.nie / total
    return acc, False


def _summary(effects: list[Effects], weights) -> Effects:
    weights = np.asarray(weights, dtype=float)
    nie = float(np.dot(weights, [x.nie for x in effects]))
    nde = float(np.dot(weights, [x.nde for x in effects]))
    te = nie + nde
    mp, undefined = _share_weighted_mp(effects)
    ratio = nie / te if abs(te) >= TE_ZERO else math.nan
    return Effects(nie, nde, te, mp, undefined, ratio)


def summarize_constant(per_period: dict, weights=None) -> Effects:
    """Calendar-period summary; default weights are uniform 1/J."""
    js = sorted(per_period)
    if weights is None:
        weights = np.full(len(js), 1.0 / len(js))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(js),) or not np.isclose(weights.sum(), 1.0):
        raise ConfigurationError("period weights must have one entry per period and sum to 1")
    return _summary([per_period[j] for j in js], weights)


def summarize_exposure(per_cell: dict, design: TrialDesign, weights=None):
    """Exposure-specific averages over eligible periods, then the uniform average over e.

    ``weights`` optionally maps e -> sequence of weights over that exposure's
    eligible periods; the default is uniform.
    """
    E = design.max_exposure
    per_exposure = {}
    for e in range(1, E + 1):
        js = [int(j) for j in design.eligible_periods(e)]
        if not js:
            raise DomainError(f"exposure time e={e} has no eligible calendar periods")
        w = np.full(len(js), 1.0 / len(js)) if weights is None or e not in weights else np.asarray(weights[e])
        per_exposure[e] = _summary([per_cell[(j, e)] for j in js], w)
    overall = _summary([per_exposure[e] for e in range(1, E + 1)], np.full(E, 1.0 / E))
    return per_exposure, overall


@dataclass(frozen=True)
class MediationEstimates:
    structure: str
    method: str
    profile: CovariateProfile | None
    overall: Effects
    per_period: dict = field(default_factory=dict)
    per_cell: dict = field(default_factory=dict)
    per_exposure: dict = field(default_factory=dict)

    def items(self):
        """Yield (level, j, e, Effects) in a fixed order."""
        yield ("overall", None, None, self.overall)
        for j in sorted(self.per_period):
            yield ("period", j, None, self.per_period[j])
        for e in sorted(self.per_exposure):
            yield ("exposure", None, e, self.per_exposure[e])
        for (j, e) in sorted(self.per_cell, key=lambda k: (k[1], k[0])):
            yield ("cell", j, e, self.per_cell[(j, e)])

    def labels(self) -> list[tuple]:
        return [(lvl, j, e, m) for lvl, j, e, _ in self.items() for m in MEASURES]

    def vector(self) -> np.ndarray:
        return np.array([v for *_, eff in self.items() for v in eff.as_tuple()], dtype=float)

    def rows(self) -> list[dict]:
        out = []
        for lvl, j, e, eff in self.items():
            for m, v in zip(MEASURES, eff.as_tuple()):
                out.append({"level": lvl, "j": j, "e": e, "measure": m, "estimate": v})
        return out


def evaluate(pair: FittedModelPair, design: TrialDesign, profile: CovariateProfile | None = None,
             method: str = "ghq", nodes: int = DEFAULT_NODES, weights=None) -> MediationEstimates:
    """All estimand levels from a fitted pair."""
    par = ModelParameters.from_pair(pair, profile)
    return evaluate_parameters(par, design, pair.spec.effect_structure, profile, method, nodes, weights)


def evaluate_parameters(par: ModelParameters, design: TrialDesign, structure: str,
                        profile: CovariateProfile | None = None, method: str = "ghq",
                        nodes: int = DEFAULT_NODES, weights=None) -> MediationEstimates:
    """All estimand levels from explicit model parameters."""
    J = design.n_periods
    if structure == CONSTANT:
        js = np.arange(1, J + 1)
        nie, nde = cell_effects(par, js, par.theta[0], par.eta[0], method, nodes)
        per_period = {int(j): Effects.from_parts(float(a), float(b)) for j, a, b in zip(js, nie, nde)}
        overall = summarize_constant(per_period, weights)
        return MediationEstimates(structure, method, profile, overall, per_period=per_period)

    E = design.max_exposure
    if par.theta.size != E:
        raise ConfigurationError(f"model has {par.theta.size} exposure effects, design has E={E}")
    cells = [(int(j), e) for e in range(1, E + 1) for j in design.eligible_periods(e)]
    js = np.array([c[0] for c in cells])
    es = np.array([c[1] for c in cells])
    nie, nde = cell_effects(par, js, par.theta[es - 1], par.eta[es - 1], method, nodes,
                            where=[f"period {j}, exposure {e}" for j, e in cells])
    per_cell = {c: Effects.from_parts(float(a), float(b)) for c, a, b in zip(cells, nie, nde)}
    per_exposure, overall = summarize_exposure(per_cell, design, weights)
    return MediationEstimates(EXPOSURE_TIME, method, profile, overall,
                              per_cell=per_cell, per_exposure=per_exposure)


@dataclass(frozen=True)
class AnalysisOptions:
    """Everything that determines an analysis besides the data."""

    method: str = "ghq"
    nodes: int = DEFAULT_NODES
    fit: FitOptions = field(default_factory=FitOptions)
    profile: object = "median"  # "median", a CovariateProfile, or a sequence of values
    outcome_covariates: tuple | None = None
    mediator_covariates: tuple | None = None
    weights: object = None

    def __post_init__(self):
        if self.method not in ("ghq", "sta"):
            raise ConfigurationError(f"method must be 'ghq' or 'sta', got {self.method!r}")
        if int(self.nodes) < 1:
            raise ConfigurationError("nodes must be positive")

    def with_method(self, method: str) -> "AnalysisOptions":
        return replace(self, method=method)


def resolve_profile(ds: MediationDataset, profile) -> CovariateProfile:
    if isinstance(profile, CovariateProfile):
        return profile
    if profile is None or (isinstance(profile, str) and profile == "median"):
        return median_profile(ds)
    x = np.asarray(profile, dtype=float).ravel()
    if x.size != len(ds.covariate_names):
        raise ConfigurationError(
            f"profile has {x.size} values for {len(ds.covariate_names)} covariates"
        )
    return CovariateProfile(ds.covariate_names, x, "user")


class PairModel:
    """Outcome and mediator models prepared once for full and leave-one-out fits."""

    def __init__(self, ds: MediationDataset, options: AnalysisOptions | None = None):
        self.ds = ds
        self.options = options or AnalysisOptions()
        fo = self.options.fit
        self.outcome = prepare_model(ds, OUTCOME, fo, self.options.outcome_covariates)
        self.mediator = prepare_model(ds, MEDIATOR, fo, self.options.mediator_covariates)

    def fit(self, drop: int | None = None, start: FittedModelPair | None = None) -> FittedModelPair:
        out = self.outcome.fit(drop, start.outcome if start is not None else None)
        med = self.mediator.fit(drop, start.mediator if start is not None else None)
        return FittedModelPair(out, med, self.ds.spec)


def estimate(ds: MediationDataset, options: AnalysisOptions | None = None) -> MediationEstimates:
    """Fit both models and evaluate every estimand level (point estimates only)."""
    options = options or AnalysisOptions()
    pair = PairModel(ds, options).fit()
    for name, model in (("outcome", pair.outcome), ("mediator", pair.mediator)):
        if not model.converged:
            cls = SeparationError if "separation" in model.message else FitError
            raise cls(f"{name} model did not converge: {model.message}")
    profile = resolve_profile(ds, options.profile)
    return evaluate(pair, ds.design, profile, options.method, options.nodes, options.weights)
