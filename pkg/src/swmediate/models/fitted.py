"""Containers for fitted mixed models and fitting options."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .design_matrix import ColumnLayout


@dataclass(frozen=True)
class FitOptions:
    """Knobs shared by both fitters.

    ``nodes`` is the adaptive Gauss-Hermite order of the logistic fitter
    (5..50). ``fixed_random_sd`` pins the random-intercept sd instead of
    estimating it. ``coef_cap`` flags divergence (separation) of logistic
    coefficients: with ``on_separation="bound"`` they are held at +-coef_cap
    and listed in ``FittedModel.separated`` (estimands then take their
    limiting values); with ``"fail"`` the fit is marked non-converged.
    ``gtol`` bounds the projected gradient at which the
    logistic fitter stops.
    """

    nodes: int = 15
    tol: float = 1e-9
    gtol: float = 1e-6
    max_iter: int = 200
    reml: bool = True
    fixed_random_sd: float | None = None
    coef_cap: float = 30.0
    sigma_start: float = 0.5
    on_separation: str = "bound"

    def __post_init__(self):
        if self.on_separation not in ("bound", "fail"):
            raise ValueError("on_separation must be 'bound' or 'fail'")
        if not 5 <= int(self.nodes) <= 50:
            raise ValueError(f"quadrature nodes must lie in 5..50, got {self.nodes}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class VarianceComponents:
    random_intercept_sd: float
    residual_sd: float | None = None
    # reserved for further random-effect sds (e.g. a cluster-period intercept)
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FittedModel:
    layout: ColumnLayout
    coef: np.ndarray
    variance: VarianceComponents
    link: str
    converged: bool
    criterion: float
    n_used: int
    n_clusters: int
    iterations: int = 0
    boundary: bool = False
    message: str = ""
    coef_cov: np.ndarray | None = None
    separated: tuple = ()

    @property
    def period_effects(self) -> np.ndarray:
        return self.coef[self.layout.periods]

    @property
    def treatment(self) -> np.ndarray:
        """Treatment coefficient(s): length 1 (constant) or E (exposure time)."""
        return self.coef[self.layout.treatment]

    @property
    def mediator_coef(self) -> float:
        k = self.layout.mediator
        return float(self.coef[k]) if k is not None else 0.0

    @property
    def covariate_coefs(self) -> np.ndarray:
        return self.coef[self.layout.covariates]

    def to_dict(self) -> dict:
        return {
            "link": self.link,
            "coefficients": dict(zip(self.layout.names, map(float, self.coef))),
            "random_intercept_sd": self.variance.random_intercept_sd,
            "residual_sd": self.variance.residual_sd,
            "criterion": self.criterion,
            "converged": self.converged,
            "boundary": self.boundary,
            "iterations": self.iterations,
            "n_used": self.n_used,
            "n_clusters": self.n_clusters,
            "message": self.message,
            "separated": list(self.separated),
        }


@dataclass(frozen=True)
class FittedModelPair:
    outcome: FittedModel
    mediator: FittedModel
    spec: object

    def __post_init__(self):
        want = {"continuous": "identity", "binary": "logit"}
        if self.outcome.link != want[self.spec.outcome_kind]:
            raise ValueError("outcome model link does not match the data type")
        if self.mediator.link != want[self.spec.mediator_kind]:
            raise ValueError("mediator model link does not match the data type")

    @property
    def converged(self) -> bool:
        return self.outcome.converged and self.mediator.converged

    def to_dict(self) -> dict:
        return {"outcome": self.outcome.to_dict(), "mediator": self.mediator.to_dict()}
