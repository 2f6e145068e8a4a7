"""Data generation, coefficient calibration and replication studies.

A scenario fixes the full data law: design, period effects, variance
components, the mediator effect and the targeted total effect and mediation
proportion. Treatment and mediator coefficients are calibrated so that the
overall summary estimands at x = 0 equal the targets.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import root
from scipy.special import expit

from .design import (
    BINARY, CONSTANT, EXPOSURE_TIME, DataTypeSpec, MediationDataset, TrialDesign, standard_design,
)
from .estimands import MEASURES, AnalysisOptions, ModelParameters, evaluate_parameters
from .exceptions import CalibrationError, ConfigurationError, SWMediateError
from .inference import heterogeneity_from_jackknife, jackknife, map_ordered
from .integrals import DEFAULT_NODES
from .models import FitOptions
from .rng import stream

CONTINUOUS_RANDOM_SD = 0.334
BINARY_RANDOM_SD = 0.605


def default_period_effects(n_periods: int):
    """Gently increasing period effects: increments 0.1 * 0.5^(j-1) and 0.3 * 0.5^(j-1)."""
    J = int(n_periods)
    if J < 2:
        raise ConfigurationError(f"period effects need J >= 2, got {J}")
    steps = 0.5 ** np.arange(J - 1)
    beta0 = np.concatenate([[0.0], np.cumsum(0.1 * steps)])
    gamma0 = np.concatenate([[0.0], np.cumsum(0.3 * steps)])
    return beta0, gamma0


def default_ramp(n_exposure: int) -> np.ndarray:
    """Linear exposure ramp 2e/(E+1), e = 1..E; its mean is 1."""
    e = np.arange(1, n_exposure + 1)
    return 2.0 * e / (n_exposure + 1)


_STRUCTURES = {"constant": CONSTANT, "exposure": EXPOSURE_TIME, "exposure_time": EXPOSURE_TIME}


@dataclass(frozen=True)
class SimulationScenario:
    """Everything that determines a simulation study given its seed.

    ``structure`` is the generating treatment-effect structure and
    ``analysis_structure`` (default: the same) the one fitted. ``anchor`` is
    "overall" to calibrate on the overall summary or a period j to calibrate
    on that period's estimands. ``methods`` lists the integration methods
    evaluated on each replicate's fits.
    """

    data_type: str = "ycmc"
    structure: str = CONSTANT
    n_clusters: int = 15
    n_periods: int = 4
    cluster_size: int = 20
    beta0: tuple | None = None
    gamma0: tuple | None = None
    sigma_alpha: float | None = None
    sigma_tau: float | None = None
    sigma_eps: float = 1.0
    sigma_e: float = 1.0
    eta: float = 0.4
    ramp: tuple | None = None
    te: float = 1.0
    mp: float = 0.25
    methods: tuple = ("ghq",)
    n_replications: int = 1000
    seed: int = 2024
    implementation_gap: int = 0
    anchor: object = "overall"
    analysis_structure: str | None = None
    fit_nodes: int = 15
    heterogeneity: bool = False
    name: str = ""

    def __post_init__(self):
        if self.data_type not in ("ycmc", "ycmb", "ybmc", "ybmb"):
            raise ConfigurationError(f"unknown data type {self.data_type!r}")
        for attr in ("structure", "analysis_structure"):
            val = getattr(self, attr)
            if val is not None:
                if val not in _STRUCTURES:
                    raise ConfigurationError(f"unknown effect structure {val!r}")
                object.__setattr__(self, attr, _STRUCTURES[val])
        if self.n_periods < 3:
            raise ConfigurationError("J must be >= 3")
        if not 0.0 <= self.mp < 1.0:
            raise ConfigurationError("target MP must lie in [0, 1)")
        if self.te == 0.0:
            raise ConfigurationError("target TE must be non-zero")
        if self.n_replications < 1 or self.cluster_size < 1:
            raise ConfigurationError("n_replications and cluster_size must be positive")
        methods = (self.methods,) if isinstance(self.methods, str) else tuple(self.methods)
        if not methods or any(m not in ("ghq", "sta") for m in methods):
            raise ConfigurationError(f"methods must be drawn from ('ghq', 'sta'), got {methods}")
        object.__setattr__(self, "methods", methods)
        if self.anchor != "overall":
            if self.structure != CONSTANT or not (isinstance(self.anchor, int) and 1 <= self.anchor <= self.n_periods):
                raise ConfigurationError("anchor must be 'overall' or a period 1..J (constant structure)")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.structure == EXPOSURE_TIME and self.fitted_structure == CONSTANT:
            raise ConfigurationError("exposure-time data cannot be analysed with the constant structure")
        self.design()  # validates I, J and the gap

    @property
    def spec(self) -> DataTypeSpec:
        return DataTypeSpec.from_code(self.data_type, self.fitted_structure)

    @property
    def fitted_structure(self) -> str:
        return self.analysis_structure or self.structure

    def design(self) -> TrialDesign:
        return standard_design(self.n_clusters, self.n_periods, self.implementation_gap)

    def random_sds(self) -> tuple[float, float]:
        spec = DataTypeSpec.from_code(self.data_type)
        sa = self.sigma_alpha
        st = self.sigma_tau
        if sa is None:
            sa = BINARY_RANDOM_SD if spec.outcome_kind == BINARY else CONTINUOUS_RANDOM_SD
        if st is None:
            st = BINARY_RANDOM_SD if spec.mediator_kind == BINARY else CONTINUOUS_RANDOM_SD
        return float(sa), float(st)

    def period_effects(self):
        b, g = default_period_effects(self.n_periods)
        b = b if self.beta0 is None else np.asarray(self.beta0, dtype=float)
        g = g if self.gamma0 is None else np.asarray(self.gamma0, dtype=float)
        if b.size != self.n_periods or g.size != self.n_periods:
            raise ConfigurationError("period effects must have one value per period")
        return b, g

    def exposure_ramp(self) -> np.ndarray:
        if self.structure == CONSTANT:
            return np.ones(1)
        E = self.design().max_exposure
        r = default_ramp(E) if self.ramp is None else np.asarray(self.ramp, dtype=float)
        if r.size != E:
            raise ConfigurationError(f"ramp needs {E} values")
        return r

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationScenario":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    def replace(self, **changes) -> "SimulationScenario":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrueParameters:
    beta0: np.ndarray
    gamma0: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    beta_m: float
    sigma_alpha: float
    sigma_tau: float
    sigma_eps: float
    sigma_e: float
    spec: DataTypeSpec

    def model_parameters(self, n_effects: int | None = None) -> ModelParameters:
        """Estimand inputs at x = 0; ``n_effects`` repeats a constant effect over E exposures."""
        theta, eta = self.theta, self.eta
        if n_effects is not None and theta.size == 1 and n_effects != 1:
            theta, eta = np.repeat(theta, n_effects), np.repeat(eta, n_effects)
        sig_e = self.sigma_e if self.spec.mediator_kind != BINARY else 0.0
        return ModelParameters(
            self.spec.outcome_kind, self.spec.mediator_kind, self.beta0, theta, self.beta_m, 0.0,
            self.sigma_alpha, self.gamma0, eta, 0.0, self.sigma_tau, sig_e,
        )

    def to_dict(self) -> dict:
        return {"beta0": self.beta0.tolist(), "gamma0": self.gamma0.tolist(),
                "theta": self.theta.tolist(), "eta": self.eta.tolist(), "beta_m": self.beta_m,
                "sigma_alpha": self.sigma_alpha, "sigma_tau": self.sigma_tau,
                "sigma_eps": self.sigma_eps, "sigma_e": self.sigma_e}


def _damped_newton(fun, x0, tol=1e-12, max_iter=60, h=1e-6):
    x = np.asarray(x0, dtype=float)
    f = fun(x)
    for _ in range(max_iter):
        norm = np.linalg.norm(f)
        if norm < tol:
            break
        Jm = np.empty((f.size, x.size))
        for k in range(x.size):
            d = np.zeros_like(x)
            d[k] = h
            Jm[:, k] = (fun(x + d) - fun(x - d)) / (2 * h)
        try:
            step = np.linalg.solve(Jm, -f)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-6:
            xn = x + t * step
            fn = fun(xn)
            if np.all(np.isfinite(fn)) and np.linalg.norm(fn) < norm:
                break
            t *= 0.5
        else:
            break
        x, f = xn, fn
    return x, f


def calibrate_coefficients(scenario: SimulationScenario, nodes: int = DEFAULT_NODES) -> TrueParameters:
    """Treatment effect(s) and mediator coefficient hitting the TE and MP targets at x = 0.

    Exposure-time scenarios scale the ramp: theta_e = theta * r_e and
    eta_e = eta * r_e. With a continuous outcome the problem is linear and
    solved in closed form; otherwise (theta, beta_M) come from a damped Newton
    iteration with a numerical Jacobian, falling back to a hybrid Powell
    solver, and must reach a residual below 1e-10.
    """
    beta0, gamma0 = scenario.period_effects()
    sa, st = scenario.random_sds()
    spec = DataTypeSpec.from_code(scenario.data_type, scenario.structure)
    ramp = scenario.exposure_ramp()
    design = scenario.design()
    target = np.array([scenario.mp * scenario.te, (1.0 - scenario.mp) * scenario.te])

    def params(theta, beta_m):
        return TrueParameters(beta0, gamma0, theta * ramp, scenario.eta * ramp, float(beta_m),
                              sa, st, scenario.sigma_eps, scenario.sigma_e, spec)

    def effects(x):
        par = params(x[0], x[1]).model_parameters()
        est = evaluate_parameters(par, design, spec.effect_structure, None, "ghq", nodes)
        eff = est.overall if scenario.anchor == "overall" else est.per_period[scenario.anchor]
        return np.array([eff.nie, eff.nde])

    if spec.outcome_kind != BINARY:
        # NIE is linear in beta_M and NDE in theta
        nie1 = effects(np.array([0.0, 1.0]))[0]
        nde1 = effects(np.array([1.0, 0.0]))[1]
        if abs(nie1) < 1e-14 and target[0] != 0.0:
            raise CalibrationError("the mediator path carries no effect (eta = 0); MP target unreachable")
        x = np.array([target[1] / nde1, target[0] / nie1 if target[0] != 0.0 else 0.0])
        resid = effects(x) - target
    else:
        x0 = np.array([target[1], target[0] / max(abs(scenario.eta), 0.1) * 4.0])
        try:
            x, resid = _damped_newton(lambda v: effects(v) - target, x0)
        except SWMediateError:
            x, resid = x0, np.array([np.inf, np.inf])
        if not np.linalg.norm(resid) < 1e-10:
            sol = root(lambda v: effects(v) - target, x0, method="hybr", options={"xtol": 1e-14})
            x, resid = sol.x, effects(sol.x) - target
    final = float(np.linalg.norm(resid))
    if not final < 1e-10:
        raise CalibrationError(f"calibration did not converge: residual {final:.3e}")
    return params(x[0], x[1])


def generate(scenario: SimulationScenario, replicate: int = 0,
             truth: TrueParameters | None = None) -> MediationDataset:
    """One simulated trial. Each cluster draws from its own (seed, replicate, cluster) stream."""
    truth = truth or calibrate_coefficients(scenario)
    design = scenario.design()
    spec = scenario.spec
    I, J, n = design.n_clusters, design.n_periods, scenario.cluster_size
    A, Ex, inc = design.treatment, design.exposure, design.included
    const = truth.theta.size == 1
    cols = {k: [] for k in ("cluster", "period", "outcome", "mediator")}
    for i in range(I):
        rng = stream(scenario.seed, replicate, i)
        alpha = truth.sigma_alpha * rng.standard_normal()
        tau = truth.sigma_tau * rng.standard_normal()
        periods = np.repeat(np.flatnonzero(inc[i]) + 1, n)
        a = A[i, periods - 1].astype(float)
        if const:
            th, et = truth.theta[0] * a, truth.eta[0] * a
        else:
            e = Ex[i, periods - 1]
            idx = np.maximum(e - 1, 0)
            th = np.where(e > 0, truth.theta[idx], 0.0)
            et = np.where(e > 0, truth.eta[idx], 0.0)
        lin_m = truth.gamma0[periods - 1] + et + tau
        if spec.mediator_kind == BINARY:
            m = (rng.random(periods.size) < expit(lin_m)).astype(float)
        else:
            m = lin_m + truth.sigma_e * rng.standard_normal(periods.size)
        lin_y = truth.beta0[periods - 1] + th + truth.beta_m * m + alpha
        if spec.outcome_kind == BINARY:
            y = (rng.random(periods.size) < expit(lin_y)).astype(float)
        else:
            y = lin_y + truth.sigma_eps * rng.standard_normal(periods.size)
        cols["cluster"].append(np.full(periods.size, i))
        cols["period"].append(periods)
        cols["outcome"].append(y)
        cols["mediator"].append(m)
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    return MediationDataset(design, spec, cat["cluster"], cat["period"], cat["outcome"], cat["mediator"])


def true_estimands(scenario: SimulationScenario, truth: TrueParameters, method: str = "ghq",
                   nodes: int = DEFAULT_NODES):
    """True values of every estimand at every level of the fitted structure."""
    design = scenario.design()
    E = design.max_exposure if scenario.fitted_structure == EXPOSURE_TIME else None
    par = truth.model_parameters(E)
    return evaluate_parameters(par, design, scenario.fitted_structure, None, method, nodes)


@dataclass
class SimulationReport:
    """Per-estimand Bias(%), MCSD, AESE and CP(%) over successful replicates.

    ``raw`` keeps, per method, the replicate-by-estimand arrays of estimates,
    standard errors and interval bounds (NaN rows for failed replicates).
    """

    scenario: SimulationScenario
    truth: TrueParameters
    labels: list
    true_values: np.ndarray
    rows: list
    n_replications: int
    n_failed: int
    failures: list
    raw: dict
    het_pvalues: np.ndarray | None = None
    elapsed_seconds: float = field(default=0.0, compare=False)

    @property
    def flagged(self) -> bool:
        return self.n_failed > 0.05 * self.n_replications

    @property
    def het_rejection_rate(self) -> float | None:
        if self.het_pvalues is None:
            return None
        p = self.het_pvalues[np.isfinite(self.het_pvalues)]
        return float(np.mean(p < 0.05)) if p.size else math.nan

    def row(self, measure: str, level: str = "overall", j=None, e=None, method: str | None = None) -> dict:
        method = method or self.scenario.methods[0]
        for r in self.rows:
            if (r["method"], r["level"], r["j"], r["e"], r["measure"]) == (method, level, j, e, measure):
                return r
        raise KeyError((method, level, j, e, measure))

    def column(self, label: tuple, what: str = "estimate", method: str | None = None) -> np.ndarray:
        method = method or self.scenario.methods[0]
        return self.raw[method][what][:, self.labels.index(tuple(label))]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "truth": self.truth.to_dict(),
            "n_replications": self.n_replications,
            "n_failed": self.n_failed,
            "flagged": self.flagged,
            "failures": [list(f) for f in self.failures],
            "heterogeneity_rejection_rate": self.het_rejection_rate,
            "rows": self.rows,
        }


def _metrics(est, se, lo, hi, truth):
    ok = np.isfinite(est)
    est = est[ok]
    n = est.size
    if n == 0:
        return dict(bias_pct=math.nan, mcsd=math.nan, aese=math.nan, cp=math.nan, n_used=0)
    bias = float(np.mean(est - truth))
    bias_pct = bias / truth * 100.0 if truth != 0.0 else math.nan
    mcsd = float(np.std(est, ddof=1)) if n >= 2 else math.nan
    se, lo, hi = se[ok], lo[ok], hi[ok]
    fin = np.isfinite(se)
    aese = float(np.mean(se[fin])) if fin.any() else math.nan
    cp = float(np.mean((lo[fin] <= truth) & (truth <= hi[fin])) * 100.0) if fin.any() else math.nan
    return dict(bias_pct=bias_pct, mcsd=mcsd, aese=aese, cp=cp, n_used=int(n))


def run_study(scenario: SimulationScenario, threads: int | None = None, progress=None) -> SimulationReport:
    """Generate, estimate and jackknife every replicate, then aggregate.

    A replicate whose full fit fails, or any of whose leave-one-out fits
    fails, is counted in ``n_failed`` and excluded from all metrics.
    """
    t0 = time.perf_counter()
    truth = calibrate_coefficients(scenario)
    methods = scenario.methods
    truths = {m: true_estimands(scenario, truth) for m in methods}
    labels = truths[methods[0]].labels()
    true_vec = truths[methods[0]].vector()
    options = AnalysisOptions(method=methods[0], fit=FitOptions(nodes=scenario.fit_nodes))

    def one(r):
        try:
            ds = generate(scenario, r, truth)
            jk = jackknife(ds, options, methods, threads=1)
        except (SWMediateError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out = f"{type(exc).__name__}: {exc}"
        else:
            if jk.failed:
                out = f"{len(jk.failed)} leave-one-out fit(s) failed: {jk.failed[0][1]}"
            else:
                out = {}
                for m in methods:
                    res = jk.results[m]
                    out[m] = np.array([[x.estimate, x.se, x.ci_lower, x.ci_upper] for x in res])
                if scenario.heterogeneity:
                    out["het"] = heterogeneity_from_jackknife(jk).p_value
        if progress is not None:
            progress(r)
        return out

    results = map_ordered(one, range(scenario.n_replications), threads)
    R, K = scenario.n_replications, len(labels)
    raw = {m: {w: np.full((R, K), math.nan) for w in ("estimate", "se", "lower", "upper")} for m in methods}
    failures = []
    het = np.full(R, math.nan) if scenario.heterogeneity else None
    for r, res in enumerate(results):
        if isinstance(res, str):
            failures.append((r, res))
            continue
        for m in methods:
            for k, w in enumerate(("estimate", "se", "lower", "upper")):
                raw[m][w][r] = res[m][:, k]
        if het is not None:
            het[r] = res["het"]
    rows = []
    for m in methods:
        for k, (level, j, e, measure) in enumerate(labels):
            met = _metrics(raw[m]["estimate"][:, k], raw[m]["se"][:, k], raw[m]["lower"][:, k],
                           raw[m]["upper"][:, k], float(true_vec[k]))
            rows.append({"method": m, "level": level, "j": j, "e": e, "measure": measure,
                         "truth": float(true_vec[k]), **met})
    return SimulationReport(scenario, truth, labels, true_vec, rows, R, len(failures), failures, raw,
                            het, time.perf_counter() - t0)


__all__ = [
    "MEASURES", "SimulationReport", "SimulationScenario", "TrueParameters", "calibrate_coefficients",
    "default_period_effects", "default_ramp", "generate", "run_study", "true_estimands",
]
