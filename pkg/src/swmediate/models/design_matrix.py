"""Fixed-effects design matrices for the paired outcome and mediator models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..design import CONSTANT, EXPOSURE_TIME, MediationDataset
from ..exceptions import ConfigurationError, RankDeficiencyError

OUTCOME = "outcome"
MEDIATOR = "mediator"


@dataclass(frozen=True)
class ColumnLayout:
    """Column slices of a design matrix.

    Period effects are coded as one indicator per calendar period with no
    global intercept, so coefficient ``periods[j-1]`` is the period-j effect.
    """

    n_periods: int
    n_treatment: int
    has_mediator: bool
    covariate_names: tuple
    names: tuple

    @property
    def periods(self) -> slice:
        return slice(0, self.n_periods)

    @property
    def treatment(self) -> slice:
        return slice(self.n_periods, self.n_periods + self.n_treatment)

    @property
    def mediator(self) -> int | None:
        return self.n_periods + self.n_treatment if self.has_mediator else None

    @property
    def covariates(self) -> slice:
        start = self.n_periods + self.n_treatment + int(self.has_mediator)
        return slice(start, start + len(self.covariate_names))

    @property
    def n_columns(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class ModelData:
    X: np.ndarray
    y: np.ndarray
    cluster: np.ndarray
    n_clusters: int
    layout: ColumnLayout


def build_design_matrix(
    ds: MediationDataset,
    target: str,
    structure: str | None = None,
    covariates: tuple | list | None = None,
    check_rank: bool = True,
) -> ModelData:
    """Assemble (X, y, cluster) for the outcome or mediator model.

    Columns: J period indicators, the treatment column (constant structure)
    or one indicator per exposure level 1..E (exposure-time structure), the
    mediator (outcome model only), then covariates. Rows outside included
    cells or with a missing outcome/mediator are dropped.
    """
    if target not in (OUTCOME, MEDIATOR):
        raise ConfigurationError(f"target must be 'outcome' or 'mediator', got {target!r}")
    structure = structure or ds.spec.effect_structure
    design = ds.design
    J = design.n_periods
    keep = ds.analysis_mask()
    cl = ds.cluster[keep]
    per = ds.period[keep]
    n = cl.size

    if covariates is None:
        cov_idx = list(range(len(ds.covariate_names)))
    else:
        lookup = {name: k for k, name in enumerate(ds.covariate_names)}
        missing = [c for c in covariates if c not in lookup]
        if missing:
            raise ConfigurationError(f"unknown covariates {missing}")
        cov_idx = [lookup[c] for c in covariates]
    cov_names = tuple(ds.covariate_names[k] for k in cov_idx)

    expo = design.exposure[cl, per - 1]
    if structure == CONSTANT:
        treat = (expo > 0).astype(float)[:, None]
        treat_names = ("theta",) if target == OUTCOME else ("eta",)
    elif structure == EXPOSURE_TIME:
        E = design.max_exposure
        if E < 1:
            raise ConfigurationError("exposure-time structure needs at least one treated cell")
        treat = (expo[:, None] == np.arange(1, E + 1)[None, :]).astype(float)
        base = "theta" if target == OUTCOME else "eta"
        treat_names = tuple(f"{base}_{e}" for e in range(1, E + 1))
        counts = treat.sum(axis=0)
        if check_rank and np.any(counts == 0):
            e = int(np.flatnonzero(counts == 0)[0]) + 1
            raise RankDeficiencyError(f"no treated records at exposure level e={e}")
    else:
        raise ConfigurationError(f"unknown structure {structure!r}")

    periods = (per[:, None] == np.arange(1, J + 1)[None, :]).astype(float)
    blocks = [periods, treat]
    prefix = "beta0" if target == OUTCOME else "gamma0"
    names = [f"{prefix}_{j}" for j in range(1, J + 1)] + list(treat_names)
    if target == OUTCOME:
        blocks.append(ds.mediator[keep][:, None])
        names.append("beta_M")
    blocks.append(ds.covariates[keep][:, cov_idx])
    xprefix = "beta_X" if target == OUTCOME else "gamma_X"
    names += [f"{xprefix}[{c}]" for c in cov_names]
    X = np.hstack(blocks) if n else np.zeros((0, len(names)))
    y = (ds.outcome if target == OUTCOME else ds.mediator)[keep].astype(float)

    layout = ColumnLayout(J, treat.shape[1], target == OUTCOME, cov_names, tuple(names))
    if check_rank:
        empty = np.flatnonzero(periods.sum(axis=0) == 0)
        if empty.size:
            raise RankDeficiencyError(f"period {empty[0] + 1} has no analysed records")
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            raise RankDeficiencyError(
                f"design matrix for the {target} model has rank {rank} < {X.shape[1]} columns"
            )
    return ModelData(X, y, cl, design.n_clusters, layout)
