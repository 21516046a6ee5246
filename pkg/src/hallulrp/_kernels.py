"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``HALLULRP_DISABLE_NUMBA=1`` to force the numpy implementations. Both
paths are always importable so they can be compared directly.
"""
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

DISABLE_NUMBA = os.environ.get("HALLULRP_DISABLE_NUMBA", "").strip() not in ("", "0")
USE_NUMBA = HAS_NUMBA and not DISABLE_NUMBA


def ab_ratios_numpy(Z, alpha, beta, eps):
    """Column-normalised alpha-beta message ratios.

    ``Z`` has shape (P, I, O): contribution of input ``i`` to output ``j`` at
    position ``p``. Returns ``V`` with ``V[p, :, j]`` summing to
    ``alpha + beta`` and a (P, O) mask of columns that needed a fallback.

    A side whose mass is not above ``eps`` falls back to |z| ratios, then to a
    uniform split when every contribution is (numerically) zero.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n_in = Z.shape[1]
    absz = np.abs(Z)
    sabs = absz.sum(axis=1, keepdims=True)
    abs_ok = sabs > eps
    abs_ratio = np.where(abs_ok, absz / np.where(abs_ok, sabs, 1.0), 1.0 / n_in)

    V = np.zeros_like(Z)
    fallback = np.zeros((Z.shape[0], Z.shape[2]), dtype=np.bool_)
    for coef, part in ((alpha, np.maximum(Z, 0.0)), (beta, np.minimum(Z, 0.0))):
        if coef == 0.0:
            continue
        s = part.sum(axis=1, keepdims=True)
        ok = np.abs(s) > eps
        ratio = np.where(ok, part / np.where(ok, s, 1.0), abs_ratio)
        V += coef * ratio
        fallback |= ~ok[:, 0, :]
    return V, fallback


def mann_whitney_auc_numpy(scores, labels):
    """AUC as the normalised Mann-Whitney U with tied pairs counted 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    # midrank of each distinct value, 1-based
    upper = np.cumsum(counts)
    midrank = upper - (counts - 1) / 2.0
    ranks = midrank[inverse]
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


if HAS_NUMBA:

    @njit(cache=True)
    def ab_ratios_numba(Z, alpha, beta, eps):
        P, n_in, n_out = Z.shape
        V = np.zeros((P, n_in, n_out))
        fallback = np.zeros((P, n_out), dtype=np.bool_)
        for p in range(P):
            for j in range(n_out):
                sp = 0.0
                sn = 0.0
                sa = 0.0
                for i in range(n_in):
                    z = Z[p, i, j]
                    if z > 0.0:
                        sp += z
                    else:
                        sn += z
                    sa += abs(z)
                for side in range(2):
                    coef = alpha if side == 0 else beta
                    if coef == 0.0:
                        continue
                    s = sp if side == 0 else sn
                    if abs(s) > eps:
                        for i in range(n_in):
                            z = Z[p, i, j]
                            if side == 0 and z > 0.0:
                                V[p, i, j] += coef * z / s
                            elif side == 1 and z < 0.0:
                                V[p, i, j] += coef * z / s
                    else:
                        fallback[p, j] = True
                        if sa > eps:
                            for i in range(n_in):
                                V[p, i, j] += coef * abs(Z[p, i, j]) / sa
                        else:
                            for i in range(n_in):
                                V[p, i, j] += coef / n_in
        return V, fallback

    @njit(cache=True)
    def mann_whitney_auc_numba(scores, labels):
        n = scores.shape[0]
        order = np.argsort(scores, kind="mergesort")
        n_pos = 0
        for i in range(n):
            if labels[i]:
                n_pos += 1
        n_neg = n - n_pos
        rank_sum = 0.0
        i = 0
        while i < n:
            j = i
            while j + 1 < n and scores[order[j + 1]] == scores[order[i]]:
                j += 1
            mid = (i + j) / 2.0 + 1.0
            for m in range(i, j + 1):
                if labels[order[m]]:
                    rank_sum += mid
            i = j + 1
        u = rank_sum - n_pos * (n_pos + 1) / 2.0
        return u / (n_pos * n_neg)

else:  # pragma: no cover
    ab_ratios_numba = ab_ratios_numpy
    mann_whitney_auc_numba = mann_whitney_auc_numpy


def ab_ratios(Z, alpha=1.0, beta=0.0, eps=1e-9):
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if USE_NUMBA:
        return ab_ratios_numba(Z, float(alpha), float(beta), float(eps))
    return ab_ratios_numpy(Z, alpha, beta, eps)


def mann_whitney_auc(scores, labels):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.bool_)
    if USE_NUMBA:
        return float(mann_whitney_auc_numba(scores, labels))
    return float(mann_whitney_auc_numpy(scores, labels))


def backend():
    return "numba" if USE_NUMBA else "numpy"
