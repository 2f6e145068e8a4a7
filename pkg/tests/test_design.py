import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swmediate.design import (
    CONSTANT, EXPOSURE_TIME, NEVER, DataTypeSpec, IndividualRecord, MediationDataset,
    TrialDesign, exposure_time, standard_design, validate_dataset,
)
from swmediate.exceptions import ConfigurationError


def test_standard_design_treatment_and_exposure():
    d = standard_design(6, 4)
    assert d.n_clusters == 6 and d.max_exposure == 3
    assert np.all(d.treatment[:, 0] == 0)
    assert d.treatment[0].tolist() == [0, 1, 1, 1]
    assert d.exposure[0].tolist() == [0, 1, 2, 3]
    assert d.exposure[-1].tolist() == [0, 0, 0, 1]
    assert exposure_time(d, 0, 3) == 2


def test_uneven_allocation_names_remainder():
    with pytest.raises(ConfigurationError, match="remainder 1"):
        standard_design(7, 4)


def test_implementation_gap_reduces_max_exposure():
    d = standard_design(8, 5, implementation_gap=1)
    assert d.max_exposure == 3
    assert not d.included[0, 1]
    # with a gap, exposure e first appears in period e + 2
    for e in range(1, 4):
        assert d.eligible_periods(e).min() == e + 2


def test_short_design_rejected():
    with pytest.raises(ConfigurationError):
        TrialDesign(np.array([2, 2]), 2)
    with pytest.raises(ConfigurationError):
        TrialDesign(np.array([1, 2]), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 8), st.integers(1, 4), st.integers(0, 1))
def test_design_invariants(J, per_seq, gap):
    d = standard_design(per_seq * (J - 1), J, gap)
    A, E = d.treatment, d.exposure
    assert np.all(A[:, 0] == 0)
    # treatment is monotone in calendar time
    assert np.all(np.diff(A, axis=1) >= 0)
    if gap == 0:
        assert np.array_equal(E > 0, A == 1)
        assert d.max_exposure == J - 1
    else:
        assert d.max_exposure == J - 2
    assert np.all(E[~d.included] >= 0)
    roundtrip = TrialDesign.from_dict(d.to_dict())
    assert np.array_equal(roundtrip.included, d.included)
    assert np.array_equal(roundtrip.adoption, d.adoption)


def test_never_treated_roundtrip_and_diagnostic():
    d = TrialDesign(np.array([2, 3, NEVER]), 3)
    assert d.treatment[2].tolist() == [0, 0, 0]
    assert TrialDesign.from_dict(d.to_dict()).adoption[2] == NEVER
    ds = MediationDataset(d, DataTypeSpec.from_code("ycmc"), [0, 1, 2], [1, 1, 1], [0.1, 0.2, 0.3], [1.0, 2.0, 3.0])
    codes = {x.code for x in validate_dataset(ds)}
    assert "never_treated" in codes


def test_data_type_codes():
    s = DataTypeSpec.from_code("ybmc", "exposure")
    assert s.code == "ybmc" and s.effect_structure == EXPOSURE_TIME
    assert s.with_structure(CONSTANT).effect_structure == CONSTANT
    with pytest.raises(ConfigurationError):
        DataTypeSpec.from_code("yxmz")


def test_validation_diagnostics():
    d = standard_design(3, 4, implementation_gap=1)
    spec = DataTypeSpec.from_code("ybmb")
    cl = [0, 0, 1, 1, 2]
    per = [1, 2, 3, 2, 1]
    y = [0, 1, 2, np.nan, 1]
    m = [1, 1, 0, 1, 0]
    codes = {x.code for x in validate_dataset(MediationDataset(d, spec, cl, per, y, m))}
    assert "outcome_out_of_support" in codes
    assert "record_in_excluded_cell" in codes  # cluster 0 adopts in period 2, excluded by the gap
    assert "partially_missing" in codes


def test_records_roundtrip():
    d = standard_design(3, 4)
    recs = [IndividualRecord("a", 1, 0.5, 1.0, (2.0,)), IndividualRecord("b", 2, 0.1, 0.0, (3.0,)),
            IndividualRecord("c", 4, 0.3, 2.0, (1.0,))]
    ds = MediationDataset.from_records(recs, d, DataTypeSpec.from_code("ycmc"), ("x",))
    assert list(ds.records()) == recs
    assert ds.cluster.tolist() == [0, 1, 2]
