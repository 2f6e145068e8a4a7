"""Adaptive Gauss-Hermite marginal likelihood of a random-intercept logistic model.

Rows are binomial cells (``trials``, ``successes``) sorted by cluster, with
``offsets[i]:offsets[i+1]`` the rows of cluster i. For each cluster the
integrand over the standardized random effect u is recentred at its mode and
scaled by the curvature there; the gradient differentiates that quadrature
rule exactly, including the dependence of the mode and scale on the
parameters (implicit differentiation of the mode equation).

Two interchangeable backends are provided: a numba-compiled per-cluster loop
and a numpy version vectorized across clusters. ``SWMEDIATE_NUMBA=0`` selects
the numpy path at import time.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SWMEDIATE_NUMBA", "1").strip().lower() not in (
    "0", "false", "no", "off",
)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)
_MODE_TOL = 1e-12
_MODE_MAXIT = 100


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# numpy backend
# --------------------------------------------------------------------------


def agq_numpy(X, trials, succ, offsets, keep, beta, sigma, z, w, want_grad=True):
    """Negative marginal log-likelihood and its gradient in (beta, sigma)."""
    p = X.shape[1]
    I = offsets.size - 1
    sizes = np.diff(offsets)
    cl_all = np.repeat(np.arange(I), sizes)
    rows = keep[cl_all]
    Xk, nk, yk = X[rows], trials[rows], succ[rows]
    kept = np.flatnonzero(keep & (sizes > 0))
    G = kept.size
    remap = np.full(I, -1)
    remap[kept] = np.arange(G)
    cl = remap[cl_all[rows]]
    starts = np.concatenate(([0], np.cumsum(sizes[kept])[:-1]))

    eta0 = Xk @ beta
    s2 = sigma * sigma

    def h_of(u):
        eta = eta0 + sigma * u[cl]
        ll = yk * eta - nk * _log1pexp(eta)
        return np.bincount(cl, weights=ll, minlength=G) - 0.5 * u * u

    u = np.zeros(G)
    h_cur = h_of(u)
    active = np.ones(G, dtype=bool)
    for _ in range(_MODE_MAXIT):
        eta = eta0 + sigma * u[cl]
        pr = _expit(eta)
        g = sigma * np.bincount(cl, weights=yk - nk * pr, minlength=G) - u
        negh2 = s2 * np.bincount(cl, weights=nk * pr * (1 - pr), minlength=G) + 1.0
        step = np.where(active, g / negh2, 0.0)
        t = np.ones(G)
        for _ in range(60):
            cand = u + t * step
            h_new = h_of(cand)
            bad = active & (h_new < h_cur - 1e-12 * (1.0 + np.abs(h_cur)))
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
        u = cand
        h_cur = h_new
        active &= np.abs(t * step) > _MODE_TOL * (1.0 + np.abs(u))
        if not active.any():
            break
    # quantities at the mode
    eta = eta0 + sigma * u[cl]
    pr = _expit(eta)
    v = nk * pr * (1 - pr)
    v3 = v * (1 - 2 * pr)
    W = np.bincount(cl, weights=v, minlength=G)
    W3 = np.bincount(cl, weights=v3, minlength=G)
    R = np.bincount(cl, weights=yk - nk * pr, minlength=G)
    negh2 = s2 * W + 1.0
    shat = 1.0 / np.sqrt(negh2)

    ut = u[:, None] + _SQRT2 * shat[:, None] * z[None, :]  # (G, Q)
    eta_t = eta0[:, None] + sigma * ut[cl]  # (R, Q)
    ll_t = yk[:, None] * eta_t - nk[:, None] * _log1pexp(eta_t)
    h_t = np.add.reduceat(ll_t, starts, axis=0) - 0.5 * ut * ut - _HALF_LOG_2PI
    a = np.log(w)[None, :] + z[None, :] ** 2 + h_t
    amax = a.max(axis=1, keepdims=True)
    ea = np.exp(a - amax)
    tot = ea.sum(axis=1)
    ll_i = math.log(_SQRT2) + np.log(shat) + amax[:, 0] + np.log(tot)
    nll = -float(ll_i.sum())
    if not want_grad:
        return nll, None

    pi = ea / tot[:, None]
    res_t = yk[:, None] - nk[:, None] * _expit(eta_t)  # (R, Q)
    Rt = np.add.reduceat(res_t, starts, axis=0)
    hp_t = sigma * Rt - ut
    S1 = (pi * hp_t).sum(axis=1)
    S2 = (pi * hp_t * z[None, :]).sum(axis=1)
    rho = (pi[cl] * res_t).sum(axis=1)  # (R,)

    Wx = np.zeros((G, p))
    np.add.at(Wx, cl, Xk * v[:, None])
    W3x = np.zeros((G, p))
    np.add.at(W3x, cl, Xk * v3[:, None])
    dh_db = np.zeros((G, p))
    np.add.at(dh_db, cl, Xk * rho[:, None])

    du_db = -sigma * Wx / negh2[:, None]
    du_ds = (R - sigma * u * W) / negh2
    D_b = -s2 * W3x - (sigma**3 * W3)[:, None] * du_db
    D_s = -2 * sigma * W - s2 * u * W3 - sigma**3 * W3 * du_ds
    dls_b = 0.5 * D_b / negh2[:, None]
    dls_s = 0.5 * D_s / negh2
    coef = 1.0 + _SQRT2 * shat * S2
    g_b = dls_b * coef[:, None] + dh_db + S1[:, None] * du_db
    g_s = dls_s * coef + (pi * ut * Rt).sum(axis=1) + S1 * du_ds
    grad = np.empty(p + 1)
    grad[:p] = -g_b.sum(axis=0)
    grad[p] = -float(g_s.sum())
    return nll, grad


# --------------------------------------------------------------------------
# numba backend
# --------------------------------------------------------------------------


def _agq_loop(X, trials, succ, offsets, keep, beta, sigma, z, w, want_grad):
    p = X.shape[1]
    I = offsets.size - 1
    Q = z.size
    s2 = sigma * sigma
    nll = 0.0
    grad = np.zeros(p + 1)
    logw = np.log(w)
    a = np.empty(Q)
    hp = np.empty(Q)
    ut = np.empty(Q)
    Rt = np.empty(Q)
    Wx = np.empty(p)
    W3x = np.empty(p)
    dh_db = np.empty(p)
    for i in range(I):
        lo = offsets[i]
        hi = offsets[i + 1]
        if not keep[i] or hi == lo:
            continue
        nr = hi - lo
        eta0 = np.empty(nr)
        for r in range(nr):
            acc = 0.0
            for k in range(p):
                acc += X[lo + r, k] * beta[k]
            eta0[r] = acc
        # mode of the integrand in u
        u = 0.0
        h_cur = 0.0
        for r in range(nr):
            e = eta0[r]
            h_cur += succ[lo + r] * e - trials[lo + r] * (max(e, 0.0) + math.log1p(math.exp(-abs(e))))
        for _ in range(_MODE_MAXIT):
            g = 0.0
            W = 0.0
            for r in range(nr):
                e = eta0[r] + sigma * u
                pr = 1.0 / (1.0 + math.exp(-e))
                g += succ[lo + r] - trials[lo + r] * pr
                W += trials[lo + r] * pr * (1.0 - pr)
            g = sigma * g - u
            step = g / (s2 * W + 1.0)
            t = 1.0
            cand = u
            h_new = h_cur
            for _h in range(60):
                cand = u + t * step
                h_new = -0.5 * cand * cand
                for r in range(nr):
                    e = eta0[r] + sigma * cand
                    h_new += succ[lo + r] * e - trials[lo + r] * (max(e, 0.0) + math.log1p(math.exp(-abs(e))))
                if h_new >= h_cur - 1e-12 * (1.0 + abs(h_cur)):
                    break
                t *= 0.5
            u = cand
            h_cur = h_new
            if abs(t * step) <= _MODE_TOL * (1.0 + abs(u)):
                break
        W = 0.0
        W3 = 0.0
        R = 0.0
        for k in range(p):
            Wx[k] = 0.0
            W3x[k] = 0.0
            dh_db[k] = 0.0
        for r in range(nr):
            e = eta0[r] + sigma * u
            pr = 1.0 / (1.0 + math.exp(-e))
            v = trials[lo + r] * pr * (1.0 - pr)
            v3 = v * (1.0 - 2.0 * pr)
            W += v
            W3 += v3
            R += succ[lo + r] - trials[lo + r] * pr
            for k in range(p):
                Wx[k] += X[lo + r, k] * v
                W3x[k] += X[lo + r, k] * v3
        negh2 = s2 * W + 1.0
        shat = 1.0 / math.sqrt(negh2)
        amax = -np.inf
        prt = np.empty((nr, Q))
        for t in range(Q):
            uu = u + _SQRT2 * shat * z[t]
            ut[t] = uu
            h = -0.5 * uu * uu - _HALF_LOG_2PI
            rs = 0.0
            for r in range(nr):
                e = eta0[r] + sigma * uu
                ex = math.exp(-abs(e))
                if e >= 0.0:
                    pr = 1.0 / (1.0 + ex)
                    h += succ[lo + r] * e - trials[lo + r] * (e + math.log1p(ex))
                else:
                    pr = ex / (1.0 + ex)
                    h += succ[lo + r] * e - trials[lo + r] * math.log1p(ex)
                prt[r, t] = pr
                rs += succ[lo + r] - trials[lo + r] * pr
            Rt[t] = rs
            hp[t] = sigma * rs - uu
            a[t] = logw[t] + z[t] * z[t] + h
            if a[t] > amax:
                amax = a[t]
        tot = 0.0
        for t in range(Q):
            a[t] = math.exp(a[t] - amax)
            tot += a[t]
        nll -= math.log(_SQRT2) + math.log(shat) + amax + math.log(tot)
        if not want_grad:
            continue
        S1 = 0.0
        S2 = 0.0
        gs_direct = 0.0
        for t in range(Q):
            pit = a[t] / tot
            a[t] = pit
            S1 += pit * hp[t]
            S2 += pit * hp[t] * z[t]
            gs_direct += pit * ut[t] * Rt[t]
        for r in range(nr):
            rho = 0.0
            for t in range(Q):
                rho += a[t] * (succ[lo + r] - trials[lo + r] * prt[r, t])
            for k in range(p):
                dh_db[k] += X[lo + r, k] * rho
        coef = 1.0 + _SQRT2 * shat * S2
        du_ds = (R - sigma * u * W) / negh2
        D_s = -2.0 * sigma * W - s2 * u * W3 - sigma * s2 * W3 * du_ds
        for k in range(p):
            du_db = -sigma * Wx[k] / negh2
            D_b = -s2 * W3x[k] - sigma * s2 * W3 * du_db
            grad[k] -= 0.5 * D_b / negh2 * coef + dh_db[k] + S1 * du_db
        grad[p] -= 0.5 * D_s / negh2 * coef + gs_direct + S1 * du_ds
    return nll, grad


if numba is not None:
    _agq_jit = numba.njit(cache=True, nogil=True)(_agq_loop)
else:  # pragma: no cover
    _agq_jit = None


def agq_numba(X, trials, succ, offsets, keep, beta, sigma, z, w, want_grad=True):
    nll, grad = _agq_jit(
        np.ascontiguousarray(X, dtype=np.float64), trials, succ, offsets, keep,
        np.ascontiguousarray(beta, dtype=np.float64), float(sigma), z, w, want_grad,
    )
    return nll, (grad if want_grad else None)


def agq(X, trials, succ, offsets, keep, beta, sigma, z, w, want_grad=True):
    """Dispatch to the backend selected by ``SWMEDIATE_NUMBA``."""
    if USE_NUMBA:
        return agq_numba(X, trials, succ, offsets, keep, beta, sigma, z, w, want_grad)
    return agq_numpy(X, trials, succ, offsets, keep, beta, sigma, z, w, want_grad)
