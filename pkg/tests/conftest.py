import numpy as np
import pytest

from swmediate.design import DataTypeSpec
from swmediate.simulation import SimulationScenario, calibrate_coefficients, generate

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line: record_criterion(name, passed, detail)."""

    def _record(name: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture(scope="session")
def small_datasets():
    """One generated trial per data type at I=15, J=4, 20 per cell."""
    out = {}
    for code in ("ycmc", "ycmb", "ybmc", "ybmb"):
        sc = SimulationScenario(data_type=code, n_clusters=15, seed=11)
        out[code] = generate(sc, 0, calibrate_coefficients(sc))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def spec(code, structure="constant"):
    return DataTypeSpec.from_code(code, structure)
