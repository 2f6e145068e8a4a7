import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid
from scipy.special import expit

from swmediate.integrals import (
    EPS, ghq_logistic_normal, logistic_normal, mu_double, mu_double_ghq, mu_double_sta,
    sta_logistic_normal,
)


def _trapezoid_ln(mean, sd, n=200_001):
    x = np.linspace(-12.0, 12.0, n)
    return trapezoid(expit(mean + sd * x) * np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi), x)


@pytest.mark.parametrize("mean,sd", [(0.4, 0.605), (0.0, 0.605), (-1.2, 1.0), (2.0, 0.3)])
def test_ghq_matches_trapezoid(mean, sd):
    assert abs(ghq_logistic_normal(mean, sd) - _trapezoid_ln(mean, sd)) < 1e-10


def test_wide_sd_needs_more_nodes():
    # 64 nodes lose accuracy once sd is large; 128 nodes recover it
    ref = _trapezoid_ln(0.3, 2.5)
    assert abs(ghq_logistic_normal(0.3, 2.5, 128) - ref) < 1e-10
    assert abs(ghq_logistic_normal(0.3, 2.5, 64) - ref) < 1e-7


def test_node_refinement():
    assert abs(ghq_logistic_normal(2.0, 1.0, 64) - ghq_logistic_normal(2.0, 1.0, 128)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-4, 4), st.floats(0, 3))
def test_logistic_normal_symmetry(mean, sd):
    a = ghq_logistic_normal(mean, sd)
    b = ghq_logistic_normal(-mean, sd)
    assert abs(a + b - 1.0) < 1e-12
    assert 0.0 < a < 1.0


def test_zero_sd_and_zero_mean():
    assert ghq_logistic_normal(0.7, 0.0) == expit(0.7)
    assert abs(ghq_logistic_normal(0.0, 1.7) - 0.5) < 1e-15
    assert sta_logistic_normal(0.7, 0.0) == pytest.approx(expit(0.7), abs=1e-15)


def test_sta_error_shrinks_like_fourth_power():
    errs = [abs(sta_logistic_normal(0.4, s) - ghq_logistic_normal(0.4, s)) for s in (0.2, 0.1)]
    assert errs[1] < errs[0] / 10


def test_mu_equals_combined_single_integral():
    c, mbar, bm, sm, sa = 0.1, 0.2, 0.8, np.hypot(0.334, 1.0), 0.605
    direct = ghq_logistic_normal(c + bm * mbar, np.hypot(bm * sm, sa))
    assert abs(mu_double_ghq(c, mbar, bm, sm, sa) - direct) < 1e-12


def test_mu_sta_reduces_to_single_sta_without_random_intercept():
    c, mbar, bm, sm = -0.3, 0.5, 0.9, 1.05
    assert mu_double_sta(c, mbar, bm, sm, 0.0) == pytest.approx(
        sta_logistic_normal(c + bm * mbar, bm * sm), abs=1e-15)


def test_broadcasting_and_clamp():
    out = logistic_normal(np.array([[-50.0], [0.0]]), np.array([0.5, 1.0, 2.0]))
    assert out.shape == (2, 3)
    assert np.all(out[0] == EPS)
    mu = mu_double([0.1, 0.2, 0.3], 0.0, 0.5, 1.0, 0.6, "sta")
    assert mu.shape == (3,)


def test_unknown_method():
    with pytest.raises(ValueError):
        logistic_normal(0.0, 1.0, "laplace")
