import os
import subprocess
import sys

import numpy as np
import pytest
import statsmodels.api as sm

from swmediate.design import DataTypeSpec, MediationDataset, standard_design
from swmediate.exceptions import ConfigurationError, RankDeficiencyError, SeparationError
from swmediate.models import (
    MEDIATOR, OUTCOME, FitOptions, PreparedGLMM, PreparedLMM, build_design_matrix,
    fit_lmm, fit_logistic_glmm, loglik_gradient_check,
)
from swmediate.models import _kernels
from swmediate.models.glmm import collapse_rows, hermite_rule


def test_column_layout_constant(small_datasets):
    md = build_design_matrix(small_datasets["ycmc"], OUTCOME)
    assert md.X.shape[1] == 4 + 2
    assert md.layout.names[:5] == ("beta0_1", "beta0_2", "beta0_3", "beta0_4", "theta")
    assert md.layout.mediator == 5
    assert np.linalg.matrix_rank(md.X) == md.X.shape[1]


def test_column_layout_exposure(small_datasets):
    ds = small_datasets["ycmc"]
    md = build_design_matrix(ds, MEDIATOR, "exposure_time")
    T = md.X[:, md.layout.treatment]
    assert T.shape[1] == 3
    expo = ds.design.exposure[md.cluster, ds.period[ds.analysis_mask()] - 1]
    for e in range(1, 4):
        assert np.array_equal(T[:, e - 1] == 1, expo == e)


def test_missing_exposure_level_names_e(small_datasets):
    ds = small_datasets["ycmc"]
    expo = ds.design.exposure[ds.cluster, ds.period - 1]
    sub = ds.subset(np.flatnonzero(expo != 3))
    with pytest.raises(RankDeficiencyError, match="e=3"):
        build_design_matrix(sub, OUTCOME, "exposure_time")


def _centered_dataset(seed=3):
    """Residuals centred within clusters: between-cluster variance estimate is negative."""
    rng = np.random.default_rng(seed)
    d = standard_design(9, 4)
    cl = np.repeat(np.arange(9), 40)
    per = np.tile(np.repeat(np.arange(1, 5), 10), 9)
    m = rng.normal(size=cl.size)
    e = rng.normal(size=cl.size)
    e -= (np.bincount(cl, e) / np.bincount(cl))[cl]
    A = d.treatment[cl, per - 1]
    y = 0.1 * per + 0.7 * A + 0.5 * m + e
    return MediationDataset(d, DataTypeSpec.from_code("ycmc"), cl, per, y, m)


def test_lmm_boundary_matches_ols():
    md = build_design_matrix(_centered_dataset(), OUTCOME)
    fit = fit_lmm(md)
    assert fit.boundary and fit.variance.random_intercept_sd == 0.0
    ols = np.linalg.lstsq(md.X, md.y, rcond=None)[0]
    assert np.max(np.abs(fit.coef - ols)) < 1e-8


def test_lmm_matches_gls_at_estimate(small_datasets):
    md = build_design_matrix(small_datasets["ycmc"], OUTCOME)
    fit = fit_lmm(md)
    s2a, s2e = fit.variance.random_intercept_sd ** 2, fit.variance.residual_sd ** 2
    XtVX = np.zeros((md.X.shape[1],) * 2)
    XtVy = np.zeros(md.X.shape[1])
    for i in range(md.n_clusters):
        r = md.cluster == i
        V = s2e * np.eye(r.sum()) + s2a
        Vi = np.linalg.inv(V)
        XtVX += md.X[r].T @ Vi @ md.X[r]
        XtVy += md.X[r].T @ Vi @ md.y[r]
    gls = np.linalg.solve(XtVX, XtVy)
    assert np.max(np.abs(fit.coef - gls)) < 1e-8


def test_lmm_agrees_with_statsmodels(small_datasets):
    md = build_design_matrix(small_datasets["ycmc"], MEDIATOR)
    fit = fit_lmm(md)
    ref = sm.MixedLM(md.y, md.X, groups=md.cluster).fit(reml=True)
    assert np.max(np.abs(fit.coef - ref.fe_params)) < 1e-4
    assert abs(fit.variance.random_intercept_sd ** 2 - np.asarray(ref.cov_re)[0, 0]) < 1e-4
    assert abs(fit.variance.residual_sd ** 2 - ref.scale) < 1e-4


def test_lmm_ml_option_differs_from_reml(small_datasets):
    md = build_design_matrix(small_datasets["ycmc"], MEDIATOR)
    reml = fit_lmm(md)
    ml = fit_lmm(md, FitOptions(reml=False))
    ref = sm.MixedLM(md.y, md.X, groups=md.cluster).fit(reml=False)
    assert abs(ml.variance.residual_sd ** 2 - ref.scale) < 1e-4
    assert ml.variance.residual_sd < reml.variance.residual_sd


def test_reml_first_order_condition(small_datasets):
    prep = PreparedLMM(build_design_matrix(small_datasets["ycmc"], OUTCOME))
    fit = prep.fit()
    lam = (fit.variance.random_intercept_sd / fit.variance.residual_sd) ** 2
    assert abs(prep.gradient(lam)) < 1e-5
    assert loglik_gradient_check(prep, 0.3) < 1e-4


def test_reml_permutation_invariance(small_datasets):
    ds = small_datasets["ycmc"]
    rng = np.random.default_rng(0)
    relabel = rng.permutation(ds.n_clusters)
    order = rng.permutation(len(ds))
    d2 = ds.design.__class__(ds.design.adoption[np.argsort(relabel)], ds.design.n_periods)
    ds2 = MediationDataset(d2, ds.spec, relabel[ds.cluster][order], ds.period[order],
                           ds.outcome[order], ds.mediator[order])
    a = PreparedLMM(build_design_matrix(ds, OUTCOME))
    b = PreparedLMM(build_design_matrix(ds2, OUTCOME))
    for lam in (0.0, 0.05, 0.3, 2.0):
        assert abs(a.criterion(lam) - b.criterion(lam)) < 1e-10


def test_single_cluster_rejected(small_datasets):
    ds = small_datasets["ycmc"]
    one = ds.subset(np.flatnonzero(ds.cluster == 0))
    with pytest.raises(ConfigurationError):
        PreparedLMM(build_design_matrix(one, MEDIATOR, check_rank=False)).fit()
    with pytest.raises(ConfigurationError):
        bin_one = small_datasets["ycmb"].subset(np.flatnonzero(small_datasets["ycmb"].cluster == 0))
        PreparedGLMM(build_design_matrix(bin_one, MEDIATOR, check_rank=False)).fit()


def test_glmm_sigma_zero_is_ordinary_logistic(small_datasets):
    md = build_design_matrix(small_datasets["ybmb"], MEDIATOR)
    fit = PreparedGLMM(md, FitOptions(fixed_random_sd=0.0)).fit()
    ref = sm.Logit(md.y, md.X).fit(disp=0, tol=1e-12, maxiter=200)
    assert np.max(np.abs(fit.coef - ref.params)) < 1e-6


def test_glmm_node_refinement(small_datasets):
    md = build_design_matrix(small_datasets["ybmc"], OUTCOME)
    prep = PreparedGLMM(md)
    fit = prep.fit()
    l15 = prep.loglik(fit.coef, fit.variance.random_intercept_sd, nodes=15)
    l25 = prep.loglik(fit.coef, fit.variance.random_intercept_sd, nodes=25)
    assert abs(l15 - l25) < 1e-6
    diffs = [abs(prep.loglik(fit.coef, 0.9, nodes=n) - prep.loglik(fit.coef, 0.9, nodes=2 * n))
             for n in (2, 3, 5)]
    assert diffs[0] >= diffs[1] >= diffs[2]


def test_glmm_gradient_matches_finite_differences(small_datasets, rng):
    for code, target in (("ybmc", OUTCOME), ("ycmb", MEDIATOR)):
        prep = PreparedGLMM(build_design_matrix(small_datasets[code], target))
        p = prep.X.shape[1]
        point = np.append(rng.normal(scale=0.3, size=p), 0.7)
        _, g = prep.negloglik(point[:p], point[p])
        assert loglik_gradient_check(prep, point) < 1e-4 * max(1.0, np.max(np.abs(g)))
    assert loglik_gradient_check(prep) < 1e-3  # at the optimum


def test_kernel_backends_agree(small_datasets):
    md = build_design_matrix(small_datasets["ybmc"], OUTCOME)
    X, n, y, off = collapse_rows(md)
    z, w = hermite_rule(15)
    keep = np.ones(md.n_clusters, dtype=bool)
    keep[4] = False
    beta = np.linspace(-0.3, 0.8, X.shape[1])
    for sigma in (0.0, 0.4, 1.3):
        a = _kernels.agq_numpy(X, n, y, off, keep, beta, sigma, z, w)
        b = _kernels.agq_numba(X, n, y, off, keep, beta, sigma, z, w)
        assert abs(a[0] - b[0]) < 1e-10 * max(1.0, abs(a[0]))
        assert np.max(np.abs(a[1] - b[1])) < 1e-8


def test_glmm_deterministic(small_datasets):
    md = build_design_matrix(small_datasets["ybmb"], OUTCOME)
    a, b = PreparedGLMM(md).fit(), PreparedGLMM(md).fit()
    assert np.array_equal(a.coef, b.coef)
    assert a.variance.random_intercept_sd == b.variance.random_intercept_sd


def test_constant_response_is_separation(small_datasets):
    ds = small_datasets["ybmb"]
    flat = MediationDataset(ds.design, ds.spec, ds.cluster, ds.period, np.zeros(len(ds)), ds.mediator)
    with pytest.raises(SeparationError):
        fit_logistic_glmm(build_design_matrix(flat, OUTCOME))


def test_perfect_separation_flagged(small_datasets):
    ds = small_datasets["ybmb"]
    y = ds.mediator.copy()  # outcome equals the mediator column
    sep = MediationDataset(ds.design, ds.spec, ds.cluster, ds.period, y, ds.mediator)
    md = build_design_matrix(sep, OUTCOME)
    with pytest.raises(SeparationError):
        fit_logistic_glmm(md, FitOptions(on_separation="fail"))
    held = fit_logistic_glmm(md)
    assert "beta_M" in held.separated
    assert abs(held.mediator_coef) == pytest.approx(30.0)


def test_numba_flag_selects_numpy_backend():
    code = "from swmediate.models import _kernels; print(_kernels.USE_NUMBA)"
    env = {**os.environ, "SWMEDIATE_NUMBA": "0"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
