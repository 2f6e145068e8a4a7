"""Stepped-wedge layouts, exposure-time bookkeeping and the individual-level dataset.

Periods are 1-based throughout the public API (period 1 is the all-control
baseline); arrays indexed by period use ``period - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .exceptions import ConfigurationError

NEVER = 10**9
"""Adoption period used for clusters that never cross over."""

CONTINUOUS = "continuous"
BINARY = "binary"
CONSTANT = "constant"
EXPOSURE_TIME = "exposure_time"

_TYPE_CODES = {
    "ycmc": (CONTINUOUS, CONTINUOUS),
    "ycmb": (CONTINUOUS, BINARY),
    "ybmc": (BINARY, CONTINUOUS),
    "ybmb": (BINARY, BINARY),
}


@dataclass(frozen=True)
class TrialDesign:
    """Cluster-by-period layout of a cross-sectional stepped-wedge trial.

    Parameters
    ----------
    adoption : array of int, shape (I,)
        First treated period of each cluster (2..J), or ``NEVER``.
    n_periods : int
        Number of calendar periods J.
    included : bool array, shape (I, J), optional
        False marks structurally missing cells such as implementation
        periods. Defaults to all True.
    implementation_gap : int
        Number of leading treated periods per cluster that serve as an
        implementation phase. Exposure time is counted from the first
        analysed treated period, so with a one-period gap the largest
        exposure in a complete design is J - 2.
    """

    adoption: np.ndarray
    n_periods: int
    included: np.ndarray = None
    implementation_gap: int = 0

    def __post_init__(self):
        adoption = np.asarray(self.adoption, dtype=np.int64).copy()
        J = int(self.n_periods)
        if J < 3:
            raise ConfigurationError(f"a stepped-wedge design needs J >= 3 periods, got {J}")
        if adoption.ndim != 1 or adoption.size == 0:
            raise ConfigurationError("adoption must be a non-empty 1-d sequence")
        treated = adoption != NEVER
        if np.any((adoption[treated] < 2) | (adoption[treated] > J)):
            raise ConfigurationError("adoption periods must lie in 2..J (period 1 is all-control)")
        if self.implementation_gap < 0:
            raise ConfigurationError("implementation_gap must be non-negative")
        if self.included is None:
            included = np.ones((adoption.size, J), dtype=bool)
        else:
            included = np.asarray(self.included, dtype=bool).copy()
            if included.shape != (adoption.size, J):
                raise ConfigurationError(
                    f"included mask has shape {included.shape}, expected {(adoption.size, J)}"
                )
        adoption.setflags(write=False)
        included.setflags(write=False)
        object.__setattr__(self, "adoption", adoption)
        object.__setattr__(self, "n_periods", J)
        object.__setattr__(self, "included", included)
        object.__setattr__(self, "implementation_gap", int(self.implementation_gap))

    @property
    def n_clusters(self) -> int:
        return int(self.adoption.size)

    @property
    def treatment(self) -> np.ndarray:
        """A[i, j-1] = 1 iff period j >= adoption period of cluster i."""
        periods = np.arange(1, self.n_periods + 1)
        return (periods[None, :] >= self.adoption[:, None]).astype(np.int64)

    @property
    def exposure(self) -> np.ndarray:
        """E[i, j-1], periods of analysed treatment as of period j (0 under control)."""
        periods = np.arange(1, self.n_periods + 1)
        e = periods[None, :] - self.adoption[:, None] + 1 - self.implementation_gap
        return np.clip(e, 0, None)

    @property
    def max_exposure(self) -> int:
        e = self.exposure[self.included]
        return int(e.max()) if e.size else 0

    def eligible_periods(self, e: int) -> np.ndarray:
        """Calendar periods (1-based) holding at least one analysed cell at exposure ``e``."""
        hit = (self.exposure == e) & self.included
        return np.flatnonzero(hit.any(axis=0)) + 1

    def to_dict(self) -> dict:
        return {
            "n_periods": self.n_periods,
            "adoption": [None if a == NEVER else int(a) for a in self.adoption],
            "excluded": [[int(i), int(j) + 1] for i, j in zip(*np.nonzero(~self.included))],
            "implementation_gap": self.implementation_gap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialDesign":
        adoption = [NEVER if a is None else int(a) for a in d["adoption"]]
        J = int(d["n_periods"])
        included = np.ones((len(adoption), J), dtype=bool)
        for i, j in d.get("excluded", []):
            included[int(i), int(j) - 1] = False
        return cls(np.array(adoption), J, included, int(d.get("implementation_gap", 0)))


def standard_design(n_clusters: int, n_periods: int, implementation_gap: int = 0) -> TrialDesign:
    """Complete stepped-wedge design with equal allocation to adoption periods 2..J.

    With ``implementation_gap=1`` the adoption cell of every cluster is
    excluded from analysis.
    """
    I, J = int(n_clusters), int(n_periods)
    if J < 3:
        raise ConfigurationError(f"J must be >= 3, got {J}")
    if implementation_gap not in (0, 1):
        raise ConfigurationError("implementation_gap must be 0 or 1")
    n_seq = J - 1
    if I <= 0 or I % n_seq:
        raise ConfigurationError(
            f"{I} clusters cannot be split evenly over {n_seq} sequences "
            f"(remainder {I % n_seq})"
        )
    adoption = np.repeat(np.arange(2, J + 1), I // n_seq)
    included = np.ones((I, J), dtype=bool)
    if implementation_gap:
        included[np.arange(I), adoption - 1] = False
    return TrialDesign(adoption, J, included, implementation_gap)


def exposure_time(design: TrialDesign, cluster: int, period: int) -> int:
    """Exposure time of ``cluster`` (0-based index) during 1-based ``period``."""
    if not 0 <= cluster < design.n_clusters:
        raise IndexError(f"cluster index {cluster} out of range 0..{design.n_clusters - 1}")
    if not 1 <= period <= design.n_periods:
        raise IndexError(f"period {period} out of range 1..{design.n_periods}")
    return int(design.exposure[cluster, period - 1])


@dataclass(frozen=True)
class DataTypeSpec:
    outcome_kind: str
    mediator_kind: str
    effect_structure: str = CONSTANT

    def __post_init__(self):
        for kind in (self.outcome_kind, self.mediator_kind):
            if kind not in (CONTINUOUS, BINARY):
                raise ConfigurationError(f"unknown variable kind {kind!r}")
        if self.effect_structure not in (CONSTANT, EXPOSURE_TIME):
            raise ConfigurationError(f"unknown effect structure {self.effect_structure!r}")

    @property
    def code(self) -> str:
        return "y{}m{}".format(self.outcome_kind[0], self.mediator_kind[0])

    @classmethod
    def from_code(cls, code: str, structure: str = CONSTANT) -> "DataTypeSpec":
        code = code.lower().replace("_", "")
        if code not in _TYPE_CODES:
            raise ConfigurationError(f"data type must be one of {sorted(_TYPE_CODES)}, got {code!r}")
        if structure == "exposure":
            structure = EXPOSURE_TIME
        return cls(*_TYPE_CODES[code], structure)

    def with_structure(self, structure: str) -> "DataTypeSpec":
        return DataTypeSpec(self.outcome_kind, self.mediator_kind, structure)


@dataclass(frozen=True)
class IndividualRecord:
    cluster: object
    period: int
    outcome: float
    mediator: float
    covariates: tuple = ()


@dataclass(frozen=True)
class MediationDataset:
    """Individual-level records stored column-wise.

    ``cluster`` holds dense 0-based indices into ``cluster_labels`` (input
    order), which also index rows of ``design``. Missing outcome or mediator
    values are NaN.
    """

    design: TrialDesign
    spec: DataTypeSpec
    cluster: np.ndarray
    period: np.ndarray
    outcome: np.ndarray
    mediator: np.ndarray
    covariates: np.ndarray = None
    covariate_names: tuple = ()
    cluster_labels: tuple = None

    def __post_init__(self):
        n = np.asarray(self.cluster).size
        covs = self.covariates
        if covs is None:
            covs = np.zeros((n, 0))
        covs = np.asarray(covs, dtype=float).reshape(n, -1)
        labels = self.cluster_labels
        if labels is None:
            labels = tuple(range(self.design.n_clusters))
        for name, value, dtype in (
            ("cluster", self.cluster, np.int64),
            ("period", self.period, np.int64),
            ("outcome", self.outcome, float),
            ("mediator", self.mediator, float),
        ):
            arr = np.asarray(value, dtype=dtype).copy()
            if arr.shape != (n,):
                raise ConfigurationError(f"column {name} has shape {arr.shape}, expected ({n},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        covs = covs.copy()
        covs.setflags(write=False)
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        object.__setattr__(self, "cluster_labels", tuple(labels))
        if len(self.covariate_names) != covs.shape[1]:
            raise ConfigurationError("covariate_names does not match the covariate matrix")

    def __len__(self) -> int:
        return self.cluster.size

    @property
    def n_clusters(self) -> int:
        return self.design.n_clusters

    def records(self) -> Iterator[IndividualRecord]:
        for k in range(len(self)):
            yield IndividualRecord(
                self.cluster_labels[self.cluster[k]],
                int(self.period[k]),
                float(self.outcome[k]),
                float(self.mediator[k]),
                tuple(self.covariates[k]),
            )

    def analysis_mask(self) -> np.ndarray:
        """Rows that enter model fitting: included cells with both variables observed."""
        inc = self.design.included[self.cluster, self.period - 1]
        return inc & np.isfinite(self.outcome) & np.isfinite(self.mediator)

    def subset(self, rows: np.ndarray) -> "MediationDataset":
        rows = np.asarray(rows)
        return MediationDataset(
            self.design, self.spec, self.cluster[rows], self.period[rows],
            self.outcome[rows], self.mediator[rows], self.covariates[rows],
            self.covariate_names, self.cluster_labels,
        )

    def with_spec(self, spec: DataTypeSpec) -> "MediationDataset":
        return MediationDataset(
            self.design, spec, self.cluster, self.period, self.outcome, self.mediator,
            self.covariates, self.covariate_names, self.cluster_labels,
        )

    @classmethod
    def from_records(
        cls,
        records: Sequence[IndividualRecord],
        design: TrialDesign,
        spec: DataTypeSpec,
        covariate_names: Sequence[str] = (),
    ) -> "MediationDataset":
        labels: dict = {}
        for r in records:
            labels.setdefault(r.cluster, len(labels))
        n_cov = len(covariate_names)
        covs = np.array([list(r.covariates) for r in records], dtype=float).reshape(len(records), n_cov)
        return cls(
            design, spec,
            np.array([labels[r.cluster] for r in records]),
            np.array([r.period for r in records]),
            np.array([r.outcome for r in records], dtype=float),
            np.array([r.mediator for r in records], dtype=float),
            covs, tuple(covariate_names), tuple(labels),
        )


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    rows: tuple = field(default=())

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "rows": list(self.rows[:20]),
                "n_rows": len(self.rows)}


def _rows(mask) -> tuple:
    return tuple(int(k) for k in np.flatnonzero(mask))


def validate_dataset(ds: MediationDataset) -> list[Diagnostic]:
    """Collect machine-readable problems with ``ds``; an empty list means valid."""
    out: list[Diagnostic] = []
    design = ds.design
    bad_cluster = (ds.cluster < 0) | (ds.cluster >= design.n_clusters)
    bad_period = (ds.period < 1) | (ds.period > design.n_periods)
    if bad_cluster.any():
        out.append(Diagnostic("cluster_out_of_range", "cluster index outside the design", _rows(bad_cluster)))
    if bad_period.any():
        out.append(Diagnostic("period_out_of_range", f"period outside 1..{design.n_periods}", _rows(bad_period)))
    if out:
        return out

    for name, values, kind in (
        ("outcome", ds.outcome, ds.spec.outcome_kind),
        ("mediator", ds.mediator, ds.spec.mediator_kind),
    ):
        finite = np.isfinite(values)
        if kind == BINARY:
            bad = finite & (values != 0) & (values != 1)
            if bad.any():
                out.append(Diagnostic(f"{name}_out_of_support", f"{name} out of support for a binary variable", _rows(bad)))
        bad_inf = np.isinf(values)
        if bad_inf.any():
            out.append(Diagnostic(f"{name}_not_finite", f"{name} is infinite", _rows(bad_inf)))

    included = design.included[ds.cluster, ds.period - 1]
    present = np.isfinite(ds.outcome) | np.isfinite(ds.mediator)
    in_excluded = ~included & present
    if in_excluded.any():
        out.append(Diagnostic(
            "record_in_excluded_cell",
            "observed outcome or mediator in an excluded (implementation) cell",
            _rows(in_excluded),
        ))
    half = included & (np.isfinite(ds.outcome) != np.isfinite(ds.mediator))
    if half.any():
        out.append(Diagnostic("partially_missing", "outcome or mediator missing in an included cell", _rows(half)))

    usable = ds.analysis_mask()
    for j in range(1, design.n_periods + 1):
        if design.included[:, j - 1].any() and not usable[ds.period == j].any():
            out.append(Diagnostic("period_all_missing", f"period {j} has no usable records"))

    if ds.covariates.shape[1] and not np.all(np.isfinite(ds.covariates[usable])):
        bad = usable & ~np.all(np.isfinite(ds.covariates), axis=1)
        out.append(Diagnostic("covariate_missing", "missing covariate values in analysed rows", _rows(bad)))

    if np.any(design.adoption == NEVER):
        out.append(Diagnostic("never_treated", "design contains never-treated clusters"))
    return out
