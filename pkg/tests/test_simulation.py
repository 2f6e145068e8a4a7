import json
import math

import numpy as np
import pytest

from swmediate.estimands import PairModel
from swmediate.exceptions import ConfigurationError
from swmediate.integrals import ghq_logistic_normal
from swmediate.simulation import (
    SimulationScenario, calibrate_coefficients, default_period_effects, default_ramp, generate,
    run_study, true_estimands,
)


def test_period_effects():
    b, g = default_period_effects(4)
    assert np.allclose(b, [0.0, 0.1, 0.15, 0.175], atol=1e-15)
    assert np.allclose(g, [0.0, 0.3, 0.45, 0.525], atol=1e-15)
    with pytest.raises(ConfigurationError):
        default_period_effects(1)


def test_ramp_mean_one():
    r = default_ramp(3)
    assert np.allclose(r, [0.5, 1.0, 1.5]) and r.mean() == pytest.approx(1.0)


def test_continuous_calibration_closed_form():
    t = calibrate_coefficients(SimulationScenario(data_type="ycmc"))
    assert t.theta[0] == pytest.approx(0.75, abs=1e-12)
    assert t.beta_m == pytest.approx(0.625, abs=1e-12)
    t0 = calibrate_coefficients(SimulationScenario(data_type="ycmb", mp=0.0))
    assert t0.beta_m == 0.0


@pytest.mark.parametrize("code", ["ycmc", "ycmb", "ybmc", "ybmb"])
@pytest.mark.parametrize("structure", ["constant", "exposure"])
def test_calibration_hits_targets(code, structure):
    sc = SimulationScenario(data_type=code, structure=structure, te=1.0, mp=0.25)
    truth = calibrate_coefficients(sc)
    ov = true_estimands(sc, truth).overall
    assert abs(ov.te - 1.0) < 1e-8 and abs(ov.mp - 0.25) < 1e-8


def test_period_anchor():
    sc = SimulationScenario(data_type="ybmb", anchor=2)
    est = true_estimands(sc, calibrate_coefficients(sc))
    assert abs(est.per_period[2].te - 1.0) < 1e-8


def test_generation_is_deterministic_and_cluster_keyed():
    sc = SimulationScenario(data_type="ybmc", seed=99)
    truth = calibrate_coefficients(sc)
    a, b = generate(sc, 3, truth), generate(sc, 3, truth)
    assert np.array_equal(a.outcome, b.outcome) and np.array_equal(a.mediator, b.mediator)
    c = generate(sc, 4, truth)
    assert not np.array_equal(a.mediator, c.mediator)
    # cluster streams are independent of the number of clusters
    big = generate(sc.replace(n_clusters=30), 3, calibrate_coefficients(sc.replace(n_clusters=30)))
    first = a.cluster == 0
    assert np.array_equal(a.mediator[first], big.mediator[big.cluster == 0])


def test_binary_mediator_prevalence_matches_truth():
    sc = SimulationScenario(data_type="ycmb", n_clusters=300, cluster_size=20, seed=7)
    truth = calibrate_coefficients(sc)
    ds = generate(sc, 0, truth)
    sel = ds.period == 1
    kappa = ghq_logistic_normal(truth.gamma0[0], truth.sigma_tau)
    p = ds.mediator[sel].mean()
    # cluster-level variance dominates: se from cluster means
    cm = np.array([ds.mediator[sel & (ds.cluster == i)].mean() for i in range(300)])
    assert abs(p - kappa) < 3 * cm.std(ddof=1) / math.sqrt(300)


def test_continuous_mediator_icc():
    sc = SimulationScenario(data_type="ycmc", n_clusters=300, cluster_size=50, seed=8)
    ds = generate(sc, 0, calibrate_coefficients(sc))
    sel = ds.period == 1
    m = ds.mediator[sel]
    cl = ds.cluster[sel]
    means = np.bincount(cl, m) / np.bincount(cl)
    within = np.mean((m - means[cl]) ** 2) * 50 / 49
    between = means.var(ddof=1) - within / 50
    icc = between / (between + within)
    assert abs(icc - 0.334 ** 2 / (0.334 ** 2 + 1)) < 0.03


def test_scenario_validation_and_round_trip():
    sc = SimulationScenario(data_type="ybmb", structure="exposure", methods=("ghq", "sta"), name="x")
    again = SimulationScenario.from_dict(json.loads(json.dumps(sc.to_dict())))
    assert again == sc
    for bad in ({"mp": 1.0}, {"data_type": "ycmd"}, {"n_clusters": 14}, {"methods": ("laplace",)}):
        with pytest.raises(ConfigurationError):
            SimulationScenario(**bad)
    with pytest.raises(ConfigurationError):
        SimulationScenario.from_dict({"bogus": 1})


def test_single_replication_report():
    rep = run_study(SimulationScenario(data_type="ycmc", n_replications=1, seed=3))
    row = rep.row("NDE")
    assert math.isnan(row["mcsd"]) and row["n_used"] == 1
    assert rep.n_failed == 0 and not rep.flagged


def test_study_is_reproducible():
    sc = SimulationScenario(data_type="ybmb", n_replications=3, seed=21)
    a, b = run_study(sc), run_study(sc)
    assert a.rows == b.rows


def test_outcome_icc_near_one_tenth():
    sc = SimulationScenario(data_type="ycmc", n_clusters=30, seed=12)
    truth = calibrate_coefficients(sc)
    iccs = []
    for r in range(30):
        vc = PairModel(generate(sc, r, truth)).fit().outcome.variance
        iccs.append(vc.random_intercept_sd ** 2 / (vc.random_intercept_sd ** 2 + vc.residual_sd ** 2))
    assert abs(np.mean(iccs) - 0.1) < 0.02
