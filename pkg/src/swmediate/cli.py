"""Command-line entry point: ``swmediate {mediate,simulate,generate,validate}``.

Exit codes: 0 success, 1 configuration error, 2 data validation failure,
3 model fitting failure. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .design import EXPOSURE_TIME, DataTypeSpec, validate_dataset
from .estimands import AnalysisOptions
from .exceptions import ConfigurationError, DataValidationError, FitError, SWMediateError
from .inference import heterogeneity_from_jackknife, jackknife
from .models import FitOptions
from .simulation import SimulationScenario, generate, run_study

log = logging.getLogger("swmediate")

EXIT_OK, EXIT_CONFIG, EXIT_VALIDATION, EXIT_FIT = 0, 1, 2, 3


@dataclass
class AnalysisConfig:
    data: Path
    design: Path | None = None
    data_type: str = "ycmc"
    structure: str = "constant"
    outcome_covariates: tuple | None = None
    mediator_covariates: tuple | None = None
    covariates: tuple | None = None
    method: str = "ghq"
    nodes: int = 64
    fit_nodes: int = 15
    profile: object = "median"
    winzorize_mp: bool = False
    heterogeneity_test: bool = False
    seed: int | None = None
    out: Path = Path("swmediate-out")
    format: str = "csv"
    full_precision: bool = False
    columns: dict = field(default_factory=dict)

    def __post_init__(self):
        if not Path(self.data).exists():
            raise ConfigurationError(f"data file {self.data} does not exist")
        if self.design is not None and not Path(self.design).exists():
            raise ConfigurationError(f"design file {self.design} does not exist")
        if self.format not in ("csv", "json"):
            raise ConfigurationError("format must be csv or json")

    def spec(self) -> DataTypeSpec:
        return DataTypeSpec.from_code(self.data_type, self.structure)

    def options(self) -> AnalysisOptions:
        return AnalysisOptions(
            method=self.method, nodes=self.nodes, fit=FitOptions(nodes=self.fit_nodes),
            profile=self.profile, outcome_covariates=self.outcome_covariates,
            mediator_covariates=self.mediator_covariates,
        )


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else None


def _profile(text):
    if text == "median":
        return "median"
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("profile must be 'median' or comma-separated numbers") from None


def _add_data_args(p):
    p.add_argument("--data", required=True, type=Path, help="individual-level CSV")
    p.add_argument("--design", type=Path, help="sidecar design JSON (wins over the treatment column)")
    p.add_argument("--type", dest="data_type", choices=["ycmc", "ycmb", "ybmc", "ybmb"], default="ycmc")
    p.add_argument("--structure", choices=["constant", "exposure"], default="constant")
    p.add_argument("--cluster-col", default="cluster")
    p.add_argument("--period-col", default="period")
    p.add_argument("--outcome-col", default="outcome")
    p.add_argument("--mediator-col", default="mediator")
    p.add_argument("--treatment-col", default="treatment")
    p.add_argument("--covariates", type=_csv_list, help="covariate columns (default: all other numeric)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swmediate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mediate", help="estimate NIE/NDE/TE/MP with jackknife intervals")
    _add_data_args(m)
    m.add_argument("--outcome-covariates", type=_csv_list)
    m.add_argument("--mediator-covariates", type=_csv_list)
    m.add_argument("--method", choices=["ghq", "sta"], default="ghq")
    m.add_argument("--nodes", type=int, default=64, help="Gauss-Hermite nodes for the estimand integrals")
    m.add_argument("--fit-nodes", type=int, default=15, help="adaptive quadrature nodes for logistic fits")
    m.add_argument("--profile", type=_profile, default="median")
    m.add_argument("--winzorize-mp", action="store_true")
    m.add_argument("--het-test", action="store_true")
    m.add_argument("--seed", type=int, help="accepted for symmetry; the analysis path uses no randomness")
    m.add_argument("--out", type=Path, default=Path("swmediate-out"))
    m.add_argument("--format", choices=["csv", "json"], default="csv")
    m.add_argument("--full-precision", action="store_true", help="write CSV floats at full precision")

    s = sub.add_parser("simulate", help="run a simulation study from a scenario JSON")
    s.add_argument("scenario", type=Path)
    s.add_argument("--rows", type=_csv_list, help="names of scenarios to run (default: all)")
    s.add_argument("--replications", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, default=Path("swmediate-out"))
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--full-precision", action="store_true")

    g = sub.add_parser("generate", help="write one simulated trial as CSV plus design JSON")
    g.add_argument("scenario", type=Path)
    g.add_argument("--rows", type=_csv_list)
    g.add_argument("--replicate", type=int, default=0)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", type=Path, default=Path("swmediate-out"))

    v = sub.add_parser("validate", help="check a dataset; exit 0 iff there are no diagnostics")
    _add_data_args(v)
    return parser


def _fail(code: int, exc: Exception, diagnostics=()) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc),
               "diagnostics": [d.to_dict() for d in diagnostics]}
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def _read(args, spec):
    return io.read_dataset(
        args.data, spec, args.design, cluster=args.cluster_col, period=args.period_col,
        outcome=args.outcome_col, mediator=args.mediator_col, treatment=args.treatment_col,
        covariates=list(args.covariates) if args.covariates else None,
    )


def _write(out: Path, stem: str, rows, columns, fmt: str, digits, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / f"{stem}.csv"
        path.write_text(io.rows_to_csv(rows, columns, digits))
    else:
        path = out / f"{stem}.json"
        path.write_text(io.dumps_json({**(extra or {}), "rows": rows}))
    return path


def cmd_mediate(cfg: AnalysisConfig, ds) -> int:
    problems = validate_dataset(ds)
    if problems:
        raise DataValidationError("dataset failed validation", problems)
    if cfg.spec().effect_structure == EXPOSURE_TIME and ds.design.max_exposure < 1:
        raise ConfigurationError("exposure-time analysis needs at least one treated analysed cell")
    analysis = jackknife(ds, cfg.options())
    for name, m in (("outcome", analysis.pair.outcome), ("mediator", analysis.pair.mediator)):
        log.info("%s model: converged=%s boundary=%s iterations=%d", name, m.converged, m.boundary, m.iterations)
    if analysis.failed:
        log.warning("%d leave-one-out fit(s) failed; standard errors reported as missing", len(analysis.failed))
    rows = io.estimate_rows(analysis, cfg.winzorize_mp)
    digits = None if cfg.full_precision else 3
    extra = {"data_type": cfg.data_type, "structure": cfg.structure, "method": cfg.method,
             "profile": analysis.estimates[cfg.method].profile.to_dict(),
             "failed_replicates": [list(map(str, f)) for f in analysis.failed],
             "fits": analysis.pair.to_dict()}
    path = _write(cfg.out, "estimates", rows, io.ESTIMATE_COLUMNS, cfg.format, digits, extra)
    log.info("wrote %s", path)
    if cfg.heterogeneity_test:
        het = heterogeneity_from_jackknife(analysis)
        _write(cfg.out, "heterogeneity", [het.to_dict()], ["statistic", "df", "p_value", "contrast",
                                                            "rank_deficient"], cfg.format, digits)
    return EXIT_OK


def load_scenarios(path: Path, rows=None) -> list[SimulationScenario]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read scenario file {path}: {exc}") from exc
    if isinstance(raw, dict) and "scenarios" in raw:
        raw = raw["scenarios"]
    if isinstance(raw, dict):
        raw = [raw]
    if not isinstance(raw, list) or not all(isinstance(x, dict) for x in raw):
        raise ConfigurationError("scenario file must hold an object, a list, or {'scenarios': [...]}")
    try:
        scenarios = [SimulationScenario.from_dict(x) for x in raw]
    except TypeError as exc:
        raise ConfigurationError(f"malformed scenario: {exc}") from exc
    if rows:
        names = {s.name for s in scenarios}
        unknown = [r for r in rows if r not in names]
        if unknown:
            raise ConfigurationError(f"unknown scenario row(s): {', '.join(unknown)}")
        scenarios = [s for s in scenarios if s.name in rows]
    return scenarios


def cmd_simulate(args) -> int:
    scenarios = load_scenarios(args.scenario, args.rows)
    all_rows, reports = [], []
    for sc in scenarios:
        changes = {}
        if args.replications is not None:
            changes["n_replications"] = args.replications
        if args.seed is not None:
            changes["seed"] = args.seed
        sc = sc.replace(**changes) if changes else sc
        log.info("running scenario %s (%d replications)", sc.name or sc.data_type, sc.n_replications)
        rep = run_study(sc)
        if rep.flagged:
            log.warning("scenario %s: %d of %d replications failed", sc.name, rep.n_failed, rep.n_replications)
        all_rows.extend(io.report_rows(rep))
        reports.append(rep.to_dict())
    digits = None if args.full_precision else 3
    args.out.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        (args.out / "report.csv").write_text(io.rows_to_csv(all_rows, io.REPORT_COLUMNS, digits))
    # the JSON twin is always written
    (args.out / "report.json").write_text(io.dumps_json({"reports": reports}))
    return EXIT_OK


def cmd_generate(args) -> int:
    scenarios = load_scenarios(args.scenario, args.rows)
    if len(scenarios) != 1:
        raise ConfigurationError("generate needs exactly one scenario (use --rows)")
    sc = scenarios[0]
    if args.seed is not None:
        sc = sc.replace(seed=args.seed)
    ds = generate(sc, args.replicate)
    args.out.mkdir(parents=True, exist_ok=True)
    io.write_dataset(ds, args.out / "data.csv")
    io.save_design(ds.design, args.out / "design.json", ds.cluster_labels)
    return EXIT_OK


def cmd_validate(args) -> int:
    ds = _read(args, DataTypeSpec.from_code(args.data_type, args.structure))
    problems = validate_dataset(ds)
    for d in problems:
        sys.stdout.write(json.dumps(d.to_dict()) + "\n")
    return EXIT_OK if not problems else EXIT_VALIDATION


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "mediate":
            cfg = AnalysisConfig(
                data=args.data, design=args.design, data_type=args.data_type, structure=args.structure,
                outcome_covariates=args.outcome_covariates, mediator_covariates=args.mediator_covariates,
                covariates=args.covariates, method=args.method, nodes=args.nodes, fit_nodes=args.fit_nodes,
                profile=args.profile, winzorize_mp=args.winzorize_mp, heterogeneity_test=args.het_test,
                seed=args.seed, out=args.out, format=args.format, full_precision=args.full_precision,
            )
            ds = _read(args, cfg.spec())
            return cmd_mediate(cfg, ds)
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "generate":
            return cmd_generate(args)
        return cmd_validate(args)
    except DataValidationError as exc:
        return _fail(EXIT_VALIDATION, exc, exc.diagnostics)
    except FitError as exc:
        return _fail(EXIT_FIT, exc)
    except (ConfigurationError, SWMediateError) as exc:
        return _fail(EXIT_CONFIG, exc)


if __name__ == "__main__":
    sys.exit(main())
