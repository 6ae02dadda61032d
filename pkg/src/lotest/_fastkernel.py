"""Compiled triple loop for the leave-out variance estimator.

Same arithmetic as ``estimators.LeaveOutKernel`` fused into one pass over
(i, j, k), so each ``D_ijk`` is formed once and nothing of size n^2 is
allocated per observation.  Requires numba; callers fall back to the numpy
kernel when it is missing.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None

# diagnostics slots returned next to the estimate
N_STATS = 6
FAILED_TRIPLES, BIASED_PAIRS, BIASED_TRIPLES, CAUSING, G_REMOVALS, INCOMPLETE = range(N_STATS)


def _variance_one(M, d, D2, pos2, pw, V, e, mult, t3, robust, stats):
    n = M.shape[0]
    E2 = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if pos2[a, b]:
                E2[a, b] = (d[b] * e[a] - M[a, b] * e[b]) / D2[a, b]
    total = 0.0
    for i in range(n):
        Mii = M[i, i]
        mi = mult[i]
        ei = e[i]
        pair_total = 0.0
        triple_unb = 0.0
        triple_h = 0.0
        row_h3 = False
        for j in range(n):
            if j == i:
                continue
            Mij = M[i, j]
            pij = pos2[i, j]
            aj = V[i, j] * mult[j]
            h2 = not pij
            acc = 0.0
            sbar_j = mult[j] * E2[j, i] if pij else mult[j] * mult[j]
            if pij:
                acc += mult[i] * sbar_j  # k = i, weight exactly one
            inv_dij = 1.0 / D2[i, j] if pij else 0.0
            # diagonal of the triple sum: leave-two-out of i dropping j
            if pij:
                triple_unb += aj * aj * mi * E2[i, j]
            else:
                triple_h += aj * aj
                row_h3 = True
                stats[BIASED_TRIPLES] += 1
            for k in range(n):
                if k == i or k == j:
                    continue
                Mik = M[i, k]
                Mjk = M[j, k]
                D3 = Mii * D2[j, k] - (d[j] * Mik * Mik + Mij * Mij * d[k]) + 2.0 * Mjk * Mij * Mik
                p3 = D3 > t3
                pik = pos2[i, k]
                pjk = pos2[j, k]
                if not p3:
                    stats[FAILED_TRIPLES] += 1
                    if pik and pjk:
                        h2 = True
                c1jk = Mjk * Mik - Mij * d[k]
                if pij:
                    if p3:
                        c2jk = Mij * Mik - Mii * Mjk
                        zq = (e[j] * D2[i, k] + ei * c1jk + e[k] * c2jk) / D3
                    elif (not pik) and pjk:
                        zq = E2[j, i]
                    else:
                        zq = mult[j]
                    w = (d[j] * Mik - Mij * Mjk) * inv_dij
                    acc += w * mult[k] * mult[j] * zq
                ak = V[i, k] * mult[k]
                if p3:
                    c1kj = Mjk * Mij - Mik * d[j]
                    zi = (ei * D2[j, k] + e[j] * c1jk + e[k] * c1kj) / D3
                    triple_unb += aj * ak * mi * zi
                elif (not pjk) and pij and pik:
                    triple_unb += aj * ak * mi * E2[i, j]
                else:
                    triple_h += aj * ak
                    row_h3 = True
                    stats[BIASED_TRIPLES] += 1
            wgt = pw[i, j]
            if h2:
                stats[BIASED_PAIRS] += 1
                if wgt >= 0.0:
                    pair_total += wgt * mi * mi * sbar_j
                else:
                    stats[G_REMOVALS] += 1
            else:
                pair_total += wgt * mi * acc
        if row_h3:
            stats[CAUSING] += 1
            if triple_h < 0.0:
                stats[G_REMOVALS] += 1
                triple_h = 0.0
        if not robust and (row_h3 or stats[BIASED_PAIRS] > 0 or stats[FAILED_TRIPLES] > 0):
            stats[INCOMPLETE] = 1
            return 0.0
        total += pair_total + triple_unb + triple_h * mi * mi
    return total


def _variance_batch(M, d, D2, pos2, pw, V, E, MULT, t3, robust, stats):
    out = np.empty(E.shape[0])
    for b in range(E.shape[0]):
        out[b] = _variance_one(M, d, D2, pos2, pw, V, E[b], MULT[b], t3, robust, stats[b])
    return out


if AVAILABLE:
    _variance_one = numba.njit(cache=True)(_variance_one)
    _variance_batch = numba.njit(cache=True)(_variance_batch)


def variance_batch(M, D2, pos2, pair_weight, V, E, MULT, d_triple, robust):
    """Estimates and per-row diagnostic counters for outcome rows ``E = Y M``, ``MULT``."""
    E = np.ascontiguousarray(np.atleast_2d(E), dtype=float)
    MULT = np.ascontiguousarray(np.atleast_2d(MULT), dtype=float)
    stats = np.zeros((E.shape[0], N_STATS), dtype=np.int64)
    out = _variance_batch(
        np.ascontiguousarray(M), np.ascontiguousarray(np.diagonal(M)), np.ascontiguousarray(D2),
        np.ascontiguousarray(pos2), np.ascontiguousarray(pair_weight), np.ascontiguousarray(V),
        E, MULT, float(d_triple), bool(robust), stats,
    )
    return out, stats
