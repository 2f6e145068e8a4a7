"""Reading trial data and designs; writing result tables.

CSV tables use 3 decimals by default; JSON carries full precision. Every
writer emits rows in a fixed order so output is byte-stable across runs.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .design import NEVER, DataTypeSpec, Diagnostic, MediationDataset, TrialDesign
from .exceptions import ConfigurationError, DataValidationError


def _sorted_labels(values) -> list:
    uniq = pd.unique(pd.Series(values))
    try:
        return sorted(uniq.tolist())
    except TypeError:
        return sorted(uniq.tolist(), key=str)


def _label_key(x):
    """Normalize numpy scalars so labels compare equal to their JSON spelling."""
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)) and float(x).is_integer():
        return int(x)
    return x


def load_design(path) -> tuple[TrialDesign, list | None]:
    """Sidecar design JSON: ``n_periods``, ``adoption`` (null = never), optional
    ``clusters`` (labels aligned with ``adoption``), ``excluded`` ([cluster index,
    period] pairs) and ``implementation_gap``."""
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read design file {path}: {exc}") from exc
    try:
        design = TrialDesign.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed design file {path}: {exc}") from exc
    labels = d.get("clusters")
    if labels is not None and len(labels) != design.n_clusters:
        raise ConfigurationError("design 'clusters' must align with 'adoption'")
    return design, labels


def save_design(design: TrialDesign, path, labels=None) -> None:
    d = design.to_dict()
    if labels is not None:
        d["clusters"] = [_label_key(x) for x in labels]
    Path(path).write_text(json.dumps(d, indent=2) + "\n")


def infer_design(clusters, periods, treatment, labels: list,
                 n_periods: int | None = None) -> tuple[TrialDesign | None, list[Diagnostic]]:
    """Recover adoption periods from a 0/1 treatment column.

    Each cluster must switch at most once from control to treatment; a
    reversal, or a gap between treated periods, yields a "not uni-directional"
    diagnostic and no design.
    """
    clusters = np.asarray(clusters)
    periods = np.asarray(periods, dtype=np.int64)
    treatment = np.asarray(treatment, dtype=float)
    diags: list[Diagnostic] = []
    J = int(n_periods or periods.max())
    index = {_label_key(l): k for k, l in enumerate(labels)}
    cidx = np.array([index[_label_key(c)] for c in clusters])
    I = len(labels)
    grid = np.full((I, J), np.nan)
    for k in range(I):
        for j in range(1, J + 1):
            sel = (cidx == k) & (periods == j)
            if not sel.any():
                continue
            vals = np.unique(treatment[sel])
            if vals.size > 1:
                diags.append(Diagnostic("treatment_inconsistent",
                                        f"cluster {labels[k]} has mixed treatment in period {j}",
                                        tuple(np.flatnonzero(sel).tolist())))
            grid[k, j - 1] = vals.max()
    if diags:
        return None, diags
    adoption = []
    for k in range(I):
        row = grid[k]
        seen = np.flatnonzero(~np.isnan(row))
        vals = row[seen]
        if np.any(np.diff(vals) < 0):
            diags.append(Diagnostic("not_uni_directional",
                                    f"cluster {labels[k]} is not uni-directional: treatment switches back to control"))
            continue
        treated = seen[vals == 1]
        if treated.size and np.any(np.diff(treated) > 1):
            diags.append(Diagnostic("not_uni_directional",
                                    f"cluster {labels[k]} is not uni-directional: gap between treated periods"))
            continue
        if treated.size == 0:
            adoption.append(NEVER)
        elif treated[0] == 0:
            diags.append(Diagnostic("treated_at_baseline", f"cluster {labels[k]} is treated in period 1"))
        else:
            adoption.append(int(treated[0]) + 1)
    if diags:
        return None, diags
    included = ~np.isnan(grid)
    return TrialDesign(np.array(adoption), J, included), diags


def read_dataset(path, spec: DataTypeSpec, design_path=None, cluster="cluster", period="period",
                 outcome="outcome", mediator="mediator", treatment="treatment",
                 covariates=None) -> MediationDataset:
    """Load an individual-level CSV into a MediationDataset.

    The design comes from the sidecar JSON when given, otherwise it is
    inferred from the treatment column. ``covariates=None`` uses every
    remaining numeric column. Raises DataValidationError with diagnostics
    for missing columns or an invalid treatment pattern.
    """
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigurationError(f"cannot read data file {path}: {exc}") from exc
    required = [cluster, period, outcome, mediator]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataValidationError(
            f"missing required column(s): {', '.join(missing)}",
            [Diagnostic("missing_column", f"column {c!r} not found") for c in missing],
        )
    if covariates is None:
        skip = set(required) | {treatment}
        covariates = [c for c in df.columns if c not in skip and pd.api.types.is_numeric_dtype(df[c])]
    else:
        absent = [c for c in covariates if c not in df.columns]
        if absent:
            raise DataValidationError(
                f"missing covariate column(s): {', '.join(absent)}",
                [Diagnostic("missing_column", f"column {c!r} not found") for c in absent],
            )
    if df[period].isna().any() or df[cluster].isna().any():
        raise DataValidationError("cluster/period identifiers must not be missing",
                                  [Diagnostic("identifier_missing", "missing cluster or period id")])

    if design_path is not None:
        design, labels = load_design(design_path)
        if labels is None:
            labels = _sorted_labels(df[cluster])
    else:
        if treatment not in df.columns:
            raise DataValidationError(
                "no design file and no treatment column to infer it from",
                [Diagnostic("missing_column", f"column {treatment!r} not found")],
            )
        labels = _sorted_labels(df[cluster])
        design, diags = infer_design(df[cluster].to_numpy(), df[period].to_numpy(),
                                     df[treatment].to_numpy(), labels)
        if design is None:
            raise DataValidationError("treatment column does not describe a stepped-wedge design", diags)
    index = {_label_key(l): k for k, l in enumerate(labels)}
    unknown = sorted({str(c) for c in df[cluster] if _label_key(c) not in index})
    if unknown:
        raise DataValidationError("clusters absent from the design",
                                  [Diagnostic("cluster_out_of_range", f"unknown cluster(s): {', '.join(unknown)}")])
    cidx = np.array([index[_label_key(c)] for c in df[cluster]], dtype=np.int64)
    covs = df[list(covariates)].to_numpy(dtype=float) if covariates else None
    return MediationDataset(
        design, spec, cidx, df[period].to_numpy(dtype=np.int64),
        df[outcome].to_numpy(dtype=float), df[mediator].to_numpy(dtype=float),
        covs, tuple(covariates), tuple(_label_key(l) for l in labels),
    )


def write_dataset(ds: MediationDataset, path) -> None:
    """Write records as CSV with a derived treatment column (full precision)."""
    A = ds.design.treatment[ds.cluster, ds.period - 1]
    df = pd.DataFrame({
        "cluster": [ds.cluster_labels[c] for c in ds.cluster],
        "period": ds.period,
        "treatment": A,
        "outcome": ds.outcome,
        "mediator": ds.mediator,
    })
    for k, name in enumerate(ds.covariate_names):
        df[name] = ds.covariates[:, k]
    df.to_csv(path, index=False, float_format="%.17g")


def _fmt(x, digits):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "NA"
        if digits is None:
            return repr(x)
        return f"{x:.{digits}f}"
    return str(x)


def rows_to_csv(rows: list[dict], columns: list[str], digits: int | None = 3) -> str:
    """Serialize dict rows; ``digits=None`` writes shortest round-trip floats."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c), digits) for c in columns])
    return buf.getvalue()


def parse_csv_rows(text: str) -> list[dict]:
    """Inverse of ``rows_to_csv``: numbers become float/int, NA -> nan, blanks -> None."""
    out = []
    for r in csv.DictReader(_io.StringIO(text)):
        row = {}
        for k, v in r.items():
            if v == "":
                row[k] = None
            elif v == "NA":
                row[k] = math.nan
            else:
                try:
                    row[k] = int(v)
                except ValueError:
                    try:
                        row[k] = float(v)
                    except ValueError:
                        row[k] = {"true": True, "false": False}.get(v, v)
        out.append(row)
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n"


ESTIMATE_COLUMNS = ["method", "level", "j", "e", "measure", "estimate", "se", "ci_lower", "ci_upper", "df"]
REPORT_COLUMNS = ["scenario", "method", "level", "j", "e", "measure", "truth", "bias_pct", "mcsd",
                  "aese", "cp", "n_used"]


def estimate_rows(analysis, winzorize_mp: bool = False) -> list[dict]:
    """Flat rows (one per method, level and measure) from a JackknifeAnalysis."""
    rows = []
    for m in analysis.methods:
        for r in analysis.table(m, winzorize_mp):
            level, j, e, measure = r.label
            rows.append({"method": m, "level": level, "j": j, "e": e, "measure": measure,
                         "estimate": r.estimate, "se": r.se, "ci_lower": r.ci_lower,
                         "ci_upper": r.ci_upper, "df": r.df})
    return rows


def report_rows(report) -> list[dict]:
    name = report.scenario.name or report.scenario.data_type
    return [{"scenario": name, **r} for r in report.rows]
