import json
import time

import numpy as np
import pandas as pd
import pytest

from swmediate import io
from swmediate.cli import main


@pytest.fixture(scope="module")
def trial(tmp_path_factory):
    d = tmp_path_factory.mktemp("trial")
    (d / "scen.json").write_text(json.dumps({"scenarios": [
        {"name": "cc", "data_type": "ycmc", "n_clusters": 15, "seed": 4},
        {"name": "bb", "data_type": "ybmb", "n_clusters": 15, "seed": 4, "n_replications": 2},
    ]}))
    assert main(["generate", str(d / "scen.json"), "--rows", "cc", "--out", str(d)]) == 0
    return d


def test_validate_clean_file(trial):
    assert main(["validate", "--data", str(trial / "data.csv"), "--design", str(trial / "design.json")]) == 0


def test_missing_mediator_column(trial, tmp_path, capsys):
    df = pd.read_csv(trial / "data.csv").drop(columns="mediator")
    df.to_csv(tmp_path / "d.csv", index=False)
    code = main(["mediate", "--data", str(tmp_path / "d.csv"), "--out", str(tmp_path)])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["diagnostics"][0]["code"] == "missing_column"


def test_malformed_scenario(tmp_path):
    (tmp_path / "s.json").write_text("{not json")
    assert main(["simulate", str(tmp_path / "s.json"), "--out", str(tmp_path)]) == 1


@pytest.mark.parametrize("pattern", [[0, 1, 0, 1], [0, 1, 1, 0]])
def test_treatment_must_be_uni_directional(trial, tmp_path, capsys, pattern):
    df = pd.read_csv(trial / "data.csv")
    first = df["cluster"] == df["cluster"].iloc[0]
    df.loc[first, "treatment"] = [pattern[p - 1] for p in df.loc[first, "period"]]
    df.to_csv(tmp_path / "d.csv", index=False)
    assert main(["mediate", "--data", str(tmp_path / "d.csv"), "--out", str(tmp_path)]) == 2
    assert "not uni-directional" in capsys.readouterr().err


def test_mediate_is_byte_stable_and_round_trips(trial, tmp_path):
    args = ["mediate", "--data", str(trial / "data.csv"), "--design", str(trial / "design.json")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "estimates.csv").read_bytes()
    assert a == (tmp_path / "b" / "estimates.csv").read_bytes()
    # default CSV rounds to 3 decimals
    rows = io.parse_csv_rows(a.decode())
    assert all(len(f"{r['estimate']:.10f}".rstrip("0").split(".")[1]) <= 3 for r in rows)

    assert main(args + ["--out", str(tmp_path / "f"), "--full-precision"]) == 0
    assert main(args + ["--out", str(tmp_path / "j"), "--format", "json"]) == 0
    full = io.parse_csv_rows((tmp_path / "f" / "estimates.csv").read_text())
    js = json.loads((tmp_path / "j" / "estimates.json").read_text())["rows"]
    assert len(full) == len(js) == len(rows)
    for x, y in zip(full, js):
        for k in ("estimate", "se", "ci_lower", "ci_upper"):
            assert x[k] == y[k]  # exact
        assert abs(x["estimate"] - next(r for r in rows if r["level"] == x["level"] and r["j"] == x["j"]
                                        and r["measure"] == x["measure"])["estimate"]) <= 5e-4


def test_treatment_column_inference_matches_sidecar(trial, tmp_path):
    assert main(["mediate", "--data", str(trial / "data.csv"), "--out", str(tmp_path / "a"),
                 "--full-precision"]) == 0
    assert main(["mediate", "--data", str(trial / "data.csv"), "--design", str(trial / "design.json"),
                 "--out", str(tmp_path / "b"), "--full-precision"]) == 0
    assert (tmp_path / "a" / "estimates.csv").read_text() == (tmp_path / "b" / "estimates.csv").read_text()


def test_sta_and_ghq_agree(tmp_path, trial):
    out = {}
    for m in ("ghq", "sta"):
        assert main(["mediate", "--data", str(trial / "data.csv"), "--type", "ycmc", "--method", m,
                     "--out", str(tmp_path / m), "--format", "json"]) == 0
        out[m] = json.loads((tmp_path / m / "estimates.json").read_text())["rows"]
    for a, b in zip(out["ghq"], out["sta"]):
        assert a["estimate"] == pytest.approx(b["estimate"], abs=1e-12)  # continuous case is exact


def test_exposure_analysis_with_het_test(trial, tmp_path):
    assert main(["mediate", "--data", str(trial / "data.csv"), "--structure", "exposure", "--het-test",
                 "--out", str(tmp_path)]) == 0
    het = io.parse_csv_rows((tmp_path / "heterogeneity.csv").read_text())[0]
    assert het["df"] == 2 and 0 <= het["p_value"] <= 1


def test_simulate_smoke(trial, tmp_path):
    t0 = time.perf_counter()
    assert main(["simulate", str(trial / "scen.json"), "--rows", "cc", "--replications", "10",
                 "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t0 < 60
    rows = io.parse_csv_rows((tmp_path / "report.csv").read_text())
    assert {r["scenario"] for r in rows} == {"cc"}
    rep = json.loads((tmp_path / "report.json").read_text())["reports"][0]
    assert rep["n_replications"] == 10 and rep["n_failed"] == 0
    assert np.isfinite([r["cp"] for r in rows]).all()


def test_unknown_row_is_config_error(trial, tmp_path):
    assert main(["simulate", str(trial / "scen.json"), "--rows", "zz", "--out", str(tmp_path)]) == 1


def test_bad_arguments_exit_one(capsys):
    assert main(["mediate"]) == 1
