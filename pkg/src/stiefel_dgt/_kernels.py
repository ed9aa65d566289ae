"""Compiled inner loops for quadratic (PCA) problems.

Each kernel advances the arrays in place for up to ``max_steps`` rounds and
returns ``(steps_done, status)`` with status 0 = still running,
1 = converged, 2 = diverged. The arithmetic mirrors the numpy reference in
:mod:`stiefel_dgt.algorithms` but sums in a different order, so results agree
to rounding, not bit for bit.

Stacked iterates are handled as flat buffers with explicit offsets; slicing
3-d arrays inside the hot loop costs more than the arithmetic at these sizes.
"""

from __future__ import annotations

import numpy as np
from numba import njit

RUNNING, CONVERGED, DIVERGED = 0, 1, 2

# reassociation only, so non-finite checks stay meaningful
_FM = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FM)
def _mix(W, A, out, n, m):
    """``out[i] = sum_j W[i, j] A[j]`` on flat per-agent blocks of length ``m``."""
    for k in range(n * m):
        out[k] = 0.0
    for i in range(n):
        oi = i * m
        for j in range(n):
            w = W[i, j]
            if w != 0.0:
                oj = j * m
                for k in range(m):
                    out[oi + k] += w * A[oj + k]


@njit(cache=True, fastmath=_FM)
def _euclid_grad(C, ci, x, xo, Dv, sign, out, d, r, xt):
    """``out = 2 sign C_ci x diag(Dv)`` with ``x`` the block at offset ``xo``."""
    for c in range(d):
        for b in range(r):
            xt[b * d + c] = x[xo + c * r + b]
    for a in range(d):
        for b in range(r):
            s = 0.0
            for c in range(d):
                s += C[ci, a, c] * xt[b * d + c]
            out[a * r + b] = 2.0 * sign * Dv[b] * s


@njit(cache=True, fastmath=_FM)
def _landing(x, xo, g, lam, out, oo, d, r, A, B, xt, gt):
    """``out = (g x^T x - x g^T x) / 2 + lam x (x^T x - I)`` written at offset ``oo``.

    Evaluated as ``g A + x B`` with ``A = x^T x / 2`` and
    ``B = lam (x^T x - I) - g^T x / 2``. ``lam = 0`` gives the relative gradient.
    """
    for a in range(d):
        for b in range(r):
            xt[b * d + a] = x[xo + a * r + b]
            gt[b * d + a] = g[a * r + b]
    for p in range(r):
        for q in range(r):
            s = 0.0
            t = 0.0
            for a in range(d):
                s += xt[p * d + a] * xt[q * d + a]
                t += gt[p * d + a] * xt[q * d + a]
            A[p * r + q] = 0.5 * s
            B[p * r + q] = lam * (s - (1.0 if p == q else 0.0)) - 0.5 * t
    for a in range(d):
        for b in range(r):
            s = 0.0
            for c in range(r):
                s += g[a * r + c] * A[c * r + b] + x[xo + a * r + c] * B[c * r + b]
            out[oo + a * r + b] = s


@njit(cache=True, fastmath=_FM)
def _stop_measures(X, n, d, r, Cbar, Dv, sign, lam, xbar, g, fld, A, B, xt, gt):
    m = d * r
    for k in range(m):
        s = 0.0
        for i in range(n):
            s += X[i * m + k]
        xbar[k] = s / n
    cons = 0.0
    for i in range(n):
        s = 0.0
        for k in range(m):
            diff = X[i * m + k] - xbar[k]
            s += diff * diff
        cons += np.sqrt(s)
    _euclid_grad(Cbar, 0, xbar, 0, Dv, sign, g, d, r, xt)
    _landing(xbar, 0, g, lam, fld, 0, d, r, A, B, xt, gt)
    s = 0.0
    for k in range(m):
        s += fld[k] * fld[k]
    return np.sqrt(s), cons


@njit(cache=True)
def _bad(X, n, m, limit):
    for i in range(n):
        s = 0.0
        for k in range(m):
            v = X[i * m + k]
            if not np.isfinite(v):
                return True
            s += v * v
        if np.sqrt(s) > limit:
            return True
    return False


@njit(cache=True, fastmath=_FM)
def _drfgt(X, Y, LAM, W, C, Cbar, Dv, sign, alpha, lam, max_steps, tol_grad, tol_cons, limit, n, d, r):
    m = d * r
    Xn = np.empty(n * m)
    Yn = np.empty(n * m)
    g = np.empty(m)
    fld = np.empty(m)
    xbar = np.empty(m)
    A = np.empty(r * r)
    B = np.empty(r * r)
    xt = np.empty(m)
    gt = np.empty(m)
    for step in range(max_steps):
        _mix(W, X, Xn, n, m)
        for k in range(n * m):
            Xn[k] -= alpha * Y[k]
        if _bad(Xn, n, m, limit):
            return step + 1, DIVERGED
        _mix(W, Y, Yn, n, m)
        for i in range(n):
            o = i * m
            _euclid_grad(C, i, Xn, o, Dv, sign, g, d, r, xt)
            _landing(Xn, o, g, lam, fld, 0, d, r, A, B, xt, gt)
            for k in range(m):
                Yn[o + k] = (Yn[o + k] - LAM[o + k]) + fld[k]
                LAM[o + k] = fld[k]
        for k in range(n * m):
            X[k] = Xn[k]
            Y[k] = Yn[k]
        gn, cons = _stop_measures(X, n, d, r, Cbar, Dv, sign, lam, xbar, g, fld, A, B, xt, gt)
        if gn <= tol_grad and cons <= tol_cons:
            return step + 1, CONVERGED
    return max_steps, RUNNING


def drfgt_pca_steps(X, Y, LAM, W, C, Cbar, Dv, sign, alpha, lam, max_steps, tol_grad, tol_cons, limit):
    """Advance DRFGT on stacked ``(n, d, r)`` arrays (C-contiguous, updated in place)."""
    n, d, r = X.shape
    return _drfgt(
        X.reshape(-1), Y.reshape(-1), LAM.reshape(-1), W, C, Cbar.reshape(1, d, d), Dv, float(sign), float(alpha),
        float(lam), int(max_steps), float(tol_grad), float(tol_cons), float(limit), n, d, r,
    )


@njit(cache=True, fastmath=_FM)
def _mgs_qr(a, q, d, r):
    """Thin QR by modified Gram-Schmidt on a flat row-major ``d x r`` block.

    R has a positive diagonal by construction; returns its smallest entry.
    """
    for k in range(d * r):
        q[k] = a[k]
    smallest = np.inf
    for j in range(r):
        for p in range(j):
            s = 0.0
            for k in range(d):
                s += q[k * r + p] * q[k * r + j]
            for k in range(d):
                q[k * r + j] -= s * q[k * r + p]
        nrm = 0.0
        for k in range(d):
            nrm += q[k * r + j] * q[k * r + j]
        nrm = np.sqrt(nrm)
        if nrm < smallest:
            smallest = nrm
        if nrm > 0.0:
            for k in range(d):
                q[k * r + j] /= nrm
    return smallest


@njit(cache=True, fastmath=_FM)
def _retraction(X, Y, GR, W, C, Cbar, Dv, sign, alpha, lam, rounds, max_steps, tol_grad, tol_cons, limit, n, d, r):
    m = d * r
    Xm = np.empty(n * m)
    Ym = np.empty(n * m)
    tmp = np.empty(n * m)
    Xnew = np.empty(n * m)
    v = np.empty(m)
    target = np.empty(m)
    q = np.empty(m)
    g = np.empty(m)
    fld = np.empty(m)
    xbar = np.empty(m)
    A = np.empty(r * r)
    B = np.empty(r * r)
    xt = np.empty(m)
    gt = np.empty(m)
    for step in range(max_steps):
        for k in range(n * m):
            Xm[k] = X[k]
            Ym[k] = Y[k]
        for _ in range(rounds):
            _mix(W, Xm, tmp, n, m)
            for k in range(n * m):
                Xm[k] = tmp[k]
            _mix(W, Ym, tmp, n, m)
            for k in range(n * m):
                Ym[k] = tmp[k]
        for i in range(n):
            o = i * m
            for k in range(m):
                v[k] = (X[o + k] - Xm[o + k]) + alpha * Y[o + k]
            # tangent projection v - x sym(x^T v), then retract x - P(v)
            for p in range(r):
                for qq in range(r):
                    s = 0.0
                    for a in range(d):
                        s += X[o + a * r + p] * v[a * r + qq]
                    A[p * r + qq] = s
            for p in range(r):
                for qq in range(r):
                    B[p * r + qq] = 0.5 * (A[p * r + qq] + A[qq * r + p])
            for a in range(d):
                for b in range(r):
                    s = 0.0
                    for c in range(r):
                        s += X[o + a * r + c] * B[c * r + b]
                    target[a * r + b] = X[o + a * r + b] - (v[a * r + b] - s)
            if _mgs_qr(target, q, d, r) < 1e-12:
                return step + 1, DIVERGED
            for k in range(m):
                Xnew[o + k] = q[k]
        for k in range(n * m):
            X[k] = Xnew[k]
        if _bad(X, n, m, limit):
            return step + 1, DIVERGED
        for i in range(n):
            o = i * m
            _euclid_grad(C, i, X, o, Dv, sign, g, d, r, xt)
            _landing(X, o, g, 0.0, fld, 0, d, r, A, B, xt, gt)
            for k in range(m):
                Y[o + k] = (Ym[o + k] - GR[o + k]) + fld[k]
                GR[o + k] = fld[k]
        gn, cons = _stop_measures(X, n, d, r, Cbar, Dv, sign, lam, xbar, g, fld, A, B, xt, gt)
        if gn <= tol_grad and cons <= tol_cons:
            return step + 1, CONVERGED
    return max_steps, RUNNING


def retraction_pca_steps(X, Y, GR, W, C, Cbar, Dv, sign, alpha, lam, rounds, max_steps, tol_grad, tol_cons, limit):
    """Advance the retraction baseline on stacked ``(n, d, r)`` arrays in place."""
    n, d, r = X.shape
    return _retraction(
        X.reshape(-1), Y.reshape(-1), GR.reshape(-1), W, C, Cbar.reshape(1, d, d), Dv, float(sign), float(alpha),
        float(lam), int(rounds), int(max_steps), float(tol_grad), float(tol_cons), float(limit), n, d, r,
    )
