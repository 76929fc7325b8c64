"""Hot kernels for Linear Gaussian policy propensities.

Every kernel evaluates, for a batch of contexts, the one dimensional integral

    pi(a|x) = E_e[ prod_{b != a} Phi(e + z_a - z_b) ],   z_b = x.mu_b / (sigma ||x||)

against a set of nodes with weights (Monte Carlo draws with weight 1/S, or
Gauss-Hermite nodes rescaled to the standard normal measure), together with the
coefficients of its derivative with respect to the mean matrix.

Two backends compute the same quantities: a numba ``@njit`` loop and a chunked
numpy path. The numba backend is used when numba imports and the environment
variable ``SEQOPS_NUMBA`` is not set to ``0``.

``fast=True`` swaps the exact normal cdf/pdf for linear interpolation in a
table with step 1/1024 (absolute error below 5e-8). Both backends read the
same table, so they agree to rounding in either mode.
"""
from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import ndtr

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Phi(t) == 1 and phi(t) ~ 0 in double precision beyond +_SAT
_SAT = 8.5
_TINY = 1e-300
_TAB_STEP_INV = 1024.0
_TAB_N = int(2 * _SAT * _TAB_STEP_INV) + 2
_TAB_X = -_SAT + np.arange(_TAB_N) / _TAB_STEP_INV
CDF_TABLE = ndtr(_TAB_X)
PDF_TABLE = np.exp(-0.5 * _TAB_X**2) * _INV_SQRT_2PI

# rows per numpy chunk; bounds the (rows, nodes, K) temporaries
_CHUNK = 256


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("SEQOPS_NUMBA", "1") != "0"


def backend_name() -> str:
    return "numba" if numba_enabled() else "numpy"


# ---------------------------------------------------------------------------
# numpy path


def _cdf_pdf_numpy(arg, fast):
    if fast:
        cdf = np.interp(arg, _TAB_X, CDF_TABLE)
        pdf = np.interp(arg, _TAB_X, PDF_TABLE)
        return cdf, pdf
    return ndtr(arg), np.exp(-0.5 * arg * arg) * _INV_SQRT_2PI


def _prop_grad_numpy(z, actions, nodes, weights, want_grad, fast):
    n, K = z.shape
    prop = np.empty(n)
    coef = np.zeros((n, K)) if want_grad else np.zeros((0, 0))
    shared = nodes.shape[0] == 1
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        zc = z[lo:hi]
        ac = actions[lo:hi]
        rows = np.arange(hi - lo)
        delta = zc[rows, ac][:, None] - zc  # (r, K)
        e = nodes if shared else nodes[lo:hi]  # (1|r, S)
        arg = e[:, :, None] + delta[:, None, :]  # (r, S, K)
        F, dens = _cdf_pdf_numpy(arg, fast)
        F[rows, :, ac] = 1.0
        prop[lo:hi] = np.prod(F, axis=2) @ weights
        if want_grad:
            ones = np.ones(F.shape[:2] + (1,))
            pre = np.cumprod(np.concatenate([ones, F[:, :, :-1]], axis=2), axis=2)
            suf = np.cumprod(np.concatenate([ones, F[:, :, :0:-1]], axis=2), axis=2)[:, :, ::-1]
            g = np.einsum("rsk,s->rk", dens * pre * suf, weights)
            g[rows, ac] = 0.0
            c = -g
            c[rows, ac] = g.sum(axis=1)
            coef[lo:hi] = c
    return prop, coef


# ---------------------------------------------------------------------------
# numba path

if _HAVE_NUMBA:

    @njit(cache=True)
    def _cdf(t, fast, tab):
        if t >= _SAT:
            return 1.0
        if not fast:
            return 0.5 * math.erfc(-t * _INV_SQRT2)
        u = (t + _SAT) * _TAB_STEP_INV
        if u <= 0.0:
            return tab[0]
        j = int(u)
        return tab[j] + (tab[j + 1] - tab[j]) * (u - j)

    @njit(cache=True)
    def _prop_grad_numba(z, actions, nodes, weights, want_grad, fast, cdf_tab, pdf_tab):
        n, K = z.shape
        S = weights.shape[0]
        shared = nodes.shape[0] == 1
        prop = np.empty(n)
        if want_grad:
            coef = np.zeros((n, K))
        else:
            coef = np.zeros((0, 0))
        delta = np.empty(K)
        F = np.empty(K)
        D = np.empty(K)
        pre = np.empty(K + 1)
        suf = np.empty(K + 1)
        for i in range(n):
            a = actions[i]
            za = z[i, a]
            for b in range(K):
                delta[b] = za - z[i, b]
            row = 0 if shared else i
            acc = 0.0
            for s in range(S):
                e = nodes[row, s]
                w = weights[s]
                if not want_grad:
                    p = 1.0
                    for b in range(K):
                        if b != a:
                            p *= _cdf(e + delta[b], fast, cdf_tab)
                            if p < _TINY:
                                p = 0.0
                                break
                    acc += w * p
                    continue
                for b in range(K):
                    if b == a:
                        F[b] = 1.0
                        D[b] = 0.0
                        continue
                    t = e + delta[b]
                    if t >= _SAT:
                        F[b] = 1.0
                        D[b] = 0.0
                    elif fast:
                        u = (t + _SAT) * _TAB_STEP_INV
                        if u <= 0.0:
                            F[b] = cdf_tab[0]
                            D[b] = pdf_tab[0]
                        else:
                            j = int(u)
                            f = u - j
                            F[b] = cdf_tab[j] + (cdf_tab[j + 1] - cdf_tab[j]) * f
                            D[b] = pdf_tab[j] + (pdf_tab[j + 1] - pdf_tab[j]) * f
                    else:
                        F[b] = 0.5 * math.erfc(-t * _INV_SQRT2)
                        D[b] = math.exp(-0.5 * t * t) * _INV_SQRT_2PI
                pre[0] = 1.0
                for b in range(K):
                    pre[b + 1] = pre[b] * F[b]
                suf[K] = 1.0
                for b in range(K - 1, -1, -1):
                    suf[b] = suf[b + 1] * F[b]
                acc += w * pre[K]
                tot = 0.0
                for b in range(K):
                    g = w * D[b] * pre[b] * suf[b + 1]
                    coef[i, b] -= g
                    tot += g
                coef[i, a] += tot
            prop[i] = acc
        return prop, coef


def prop_grad(z, actions, nodes, weights, want_grad=False, fast=False):
    """Propensities of ``actions`` and optional gradient coefficients.

    Parameters
    ----------
    z : ndarray, shape (n, K)
        Standardized scores ``x.mu_b / (sigma ||x||)``.
    actions : ndarray of int, shape (n,)
    nodes : ndarray, shape (n, S) or (1, S)
        Integration nodes on the standard normal scale; a single row is shared
        by every context.
    weights : ndarray, shape (S,)
    want_grad : bool
    fast : bool
        Use the tabulated normal cdf/pdf instead of erfc/exp.

    Returns
    -------
    prop : ndarray, shape (n,)
    coef : ndarray, shape (n, K) (empty when ``want_grad`` is False)
        ``d prop_i / d mu_b = coef[i, b] * x_i / (sigma ||x_i||)``.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    actions = np.ascontiguousarray(actions, dtype=np.int64)
    nodes = np.ascontiguousarray(np.atleast_2d(nodes), dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if numba_enabled():
        return _prop_grad_numba(
            z, actions, nodes, weights, bool(want_grad), bool(fast), CDF_TABLE, PDF_TABLE
        )
    return _prop_grad_numpy(z, actions, nodes, weights, bool(want_grad), bool(fast))
