"""Leave-out estimators of the null mean and variance of the F numerator.

The location estimator and the weights only need leave-one-out residuals.
The variance estimator needs leave-two- and leave-three-out residuals; those
are produced one observation ``i`` at a time from an (n, n) slab of
``D_ijk`` values, so memory stays O(n^2) while time is O(n^3).

Every estimator takes a *multiplier* vector that is either the raw outcome
``y`` or the demeaned outcome ``y - mean(y)``.  Leave-out residuals are
always computed from ``M y``, which is unaffected by demeaning when the
design contains an intercept.

The kernel accepts outcome arrays with leading batch dimensions, which is
how the Monte Carlo test-suite evaluates thousands of error draws at once.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from lotest import _fastkernel
from lotest.algebra import (
    ProjectionCache,
    Thresholds,
    l2o_residual,
    l2o_residual_matrix,
    l3o_residual,
    pair_determinant,
    pair_determinants,
    triple_determinant,
)
from lotest.errors import DegenerateWeights, LeverageOne, RepeatedIndices, TripleRankFailure


@dataclass(frozen=True)
class SigmaEstimates:
    sigma_hat: np.ndarray
    demeaned: bool


@dataclass(frozen=True)
class UVWeights:
    U: np.ndarray
    V: np.ndarray


class VariancePath(str, enum.Enum):
    UNBIASED = "unbiased_L3O"
    ROBUST = "robust_L3O"
    FALLBACK = "positive_fallback"


@dataclass(frozen=True)
class VarianceDiagnostics:
    failed_pairs: int = 0
    failed_triples: int = 0
    biased_pairs: int = 0
    biased_triples: int = 0
    g_removals: int = 0
    causing_observations: int = 0
    n: int = 0

    @property
    def rank_failure_fraction(self) -> float:
        """Share of observations that cause some leave-three-out failure."""
        return self.causing_observations / self.n if self.n else 0.0


@dataclass(frozen=True)
class VarianceEstimate:
    value: float
    path: VariancePath
    diagnostics: VarianceDiagnostics


def multipliers(y: np.ndarray, demeaned: bool) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y - y.mean(axis=-1, keepdims=True) if demeaned else y


def sigma_loo(cache: ProjectionCache, demeaned: bool = True, Y=None) -> SigmaEstimates:
    """``sigma_i^2`` estimates ``mult_i (y_i - x_i' beta_{-i})``.

    ``Y`` optionally replaces the cached outcome by a stack of outcomes (..., n).
    """
    cache.check_leverage()
    if Y is None:
        Y, resid = cache.y, cache.resid
    else:
        Y = np.asarray(Y, dtype=float)
        resid = Y @ cache.M
    return SigmaEstimates(multipliers(Y, demeaned) * resid / cache.M_diag, demeaned)


def location_estimate(cache: ProjectionCache, sig: SigmaEstimates):
    """``sum_i B_ii sigma_i^2``; an array when ``sig`` holds a stack of outcomes."""
    value = sig.sigma_hat @ cache.B_diag
    return float(value) if np.ndim(value) == 0 else value


def weight_eigenvalues(cache: ProjectionCache, sigma2: np.ndarray) -> np.ndarray:
    """Eigenvalues of ``(R S^-1 R')^-1 R S^-1 (sum x x' s_i) S^-1 R'``, unscaled.

    Computed through the symmetric similarity transform with the Cholesky
    factor of ``R S^-1 R'``.
    """
    A = cache.XSR
    middle = A.T @ (A * sigma2[:, None])
    L = np.linalg.cholesky(cache.rxx)
    Linv = np.linalg.inv(L)
    sym = Linv @ middle @ Linv.T
    return np.linalg.eigvalsh((sym + sym.T) / 2)


def empirical_weights(cache: ProjectionCache, sig: SigmaEstimates) -> np.ndarray:
    """Clipped and normalized eigenvalues of the estimated weight matrix."""
    e_hat = location_estimate(cache, sig)
    if e_hat == 0.0:
        raise DegenerateWeights("location estimate is exactly zero")
    w_check = weight_eigenvalues(cache, sig.sigma_hat) / e_hat
    w_pos = np.maximum(w_check, 0.0)
    total = w_pos.sum()
    if not total > 0:
        raise DegenerateWeights("all weight eigenvalues are non-positive")
    return w_pos[::-1] / total


def uv_weights(cache: ProjectionCache) -> UVWeights:
    cache.check_leverage()
    M = cache.M
    ratio = cache.B_diag / cache.M_diag
    C = cache.B - M * (ratio[:, None] + ratio[None, :]) / 2
    U = 2 * C**2
    V = M * (ratio[:, None] - ratio[None, :])
    np.fill_diagonal(U, 0.0)
    np.fill_diagonal(V, 0.0)
    return UVWeights(U, V)


def null_variance(cache: ProjectionCache, sigma2, mean) -> float:
    """Exact null variance of ``numerator - E_hat`` for known variances and ``x_i' beta``."""
    uv = uv_weights(cache)
    sigma2 = np.asarray(sigma2, dtype=float)
    lin = uv.V @ np.asarray(mean, dtype=float)
    return float(sigma2 @ uv.U @ sigma2 + (lin**2) @ sigma2)


class _Row(NamedTuple):
    products: np.ndarray  # (..., n) first-line variance products for pairs (i, j)
    biased_products: np.ndarray  # (..., n) upward biased replacement mult_i^2 * sigma-bar_{j,-i}
    H_pair: np.ndarray  # (n,) bool, product for (i, j) must use the biased replacement
    triple_all: np.ndarray  # (...) sum_jk a_j a_k sigma-bar_{i,-jk}
    triple_unbiased: np.ndarray  # (...) same sum restricted to unbiased entries
    triple_biased_weight: np.ndarray  # (...) sum_jk a_j a_k over biased entries
    H_triple: np.ndarray  # (n, n) bool
    failed_triples: int
    complete: bool  # no pair or triple involving i trips a threshold


class LeaveOutKernel:
    """Shared state for the per-observation leave-out loop.

    ``Y`` is an outcome vector or a stack of them with shape ``(..., n)``.
    """

    def __init__(self, cache: ProjectionCache, Y=None, demeaned: bool = True,
                 thresholds: Thresholds | None = None):
        cache.check_leverage()
        self.cache = cache
        self.t = thresholds or cache.thresholds
        Y = cache.y if Y is None else np.asarray(Y, dtype=float)
        M = cache.M
        n = cache.n
        self.n = n
        self.M = M
        self.d = cache.M_diag
        self.e = Y @ M
        self.mult = multipliers(Y, demeaned)
        D2 = pair_determinants(cache)
        self.D2 = D2
        pos2 = D2 > self.t.d_pair
        np.fill_diagonal(pos2, False)
        self.pos2 = pos2
        self.E2 = l2o_residual_matrix(M, self.e, D2, pos2)
        uv = uv_weights(cache)
        self.U, self.V = uv.U, uv.V
        self.pair_weight = uv.U - uv.V**2
        self.Vm = uv.V * self.mult[..., None, :]
        self._eye = np.eye(n, dtype=bool)

    def row(self, i: int) -> _Row:
        M, d, D2, pos2, t = self.M, self.d, self.D2, self.pos2, self.t
        e, mlt, E2 = self.e, self.mult, self.E2
        n = self.n
        Mi = M[i]
        Mii = M[i, i]
        Mi2 = Mi * Mi
        D3 = Mii * D2 - (np.multiply.outer(d, Mi2) + np.multiply.outer(Mi2, d)) + 2 * M * np.multiply.outer(Mi, Mi)

        not_i = np.ones(n, dtype=bool)
        not_i[i] = False
        both = not_i[:, None] & not_i[None, :]
        valid = both & ~self._eye
        pos3 = valid & (D3 > t.d_triple)
        safe_D3 = np.where(pos3, D3, 1.0)
        pos2i = pos2[i]
        c1 = M * Mi[None, :] - np.multiply.outer(Mi, d)  # M_jk M_ik - M_ij M_kk

        ei = e[..., i, None, None]
        mi = mlt[..., i]

        # sigma-bar_{i,-jk} over (j, k)
        num_i = ei * D2 + e[..., :, None] * c1 + e[..., None, :] * c1.T
        resid_i = num_i / safe_D3
        not_caused_i = valid & ~pos3 & ~pos2 & pos2i[:, None] & pos2i[None, :]
        pair_ok_i = self._eye & pos2i[:, None] & not_i[:, None]
        l2o_i = E2[..., i, :][..., :, None]  # y_i - x_i' beta_{-ij}, constant along k
        Z = np.where(pos3, resid_i, np.where(not_caused_i | pair_ok_i, l2o_i, mi[..., None, None]))
        S = mi[..., None, None] * Z
        H3 = both & ~(pos3 | not_caused_i | pair_ok_i)

        a = self.Vm[..., i, :]
        triple_all = np.einsum("...j,...jk,...k->...", a, S, a)
        triple_biased = np.einsum("...j,jk,...k->...", a, H3.astype(float), a)
        triple_unb = np.einsum("...j,...jk,...k->...", a, np.where(H3, 0.0, S), a)

        # variance products for pairs (i, j): sum over k of checkM_{ik,-ij} mult_k sigma-bar_{j,-ik}
        safe_Dij = np.where(pos2i, D2[i], 1.0)
        W = (np.multiply.outer(d, Mi) - Mi[:, None] * M) / safe_Dij[:, None]
        W[~pos2i] = 0.0
        c2 = np.multiply.outer(Mi, Mi) - Mii * M  # M_ij M_ik - M_ii M_jk
        num_j = e[..., :, None] * D2[i][None, :] + ei * c1 + e[..., None, :] * c2
        resid_j = num_j / safe_D3
        not_caused_j = valid & ~pos3 & ~pos2i[None, :] & pos2i[:, None] & pos2
        l2o_j = E2[..., :, i]  # y_j - x_j' beta_{-ij}
        Zq = np.where(pos3, resid_j, np.where(not_caused_j, l2o_j[..., :, None], mlt[..., :, None]))
        Q = mlt[..., :, None] * Zq
        sbar_j = np.where(pos2i, mlt * l2o_j, mlt * mlt)  # sigma-bar_{j,-i}
        Q[..., :, i] = sbar_j
        products = mi[..., None] * np.einsum("jk,...jk,...k->...j", W, Q, mlt)

        H2 = (~pos2i | (valid & ~pos3 & pos2i[None, :] & pos2).any(axis=1)) & not_i
        biased = (mi * mi)[..., None] * sbar_j

        failed = int(np.count_nonzero(valid & ~pos3))
        complete = failed == 0 and bool(pos2i[not_i].all())
        return _Row(products, biased, H2, triple_all, triple_unb, triple_biased, H3, failed, complete)

    def estimate(self, robust: bool = True):
        """Return (value, diagnostics); ``value`` carries the batch shape of Y."""
        pw = self.pair_weight
        total = 0.0
        failed_triples = biased_pairs = biased_triples = causing = 0
        g_removals = 0
        for i in range(self.n):
            row = self.row(i)
            if not robust:
                if not row.complete:
                    raise _incomplete()
                total = total + row.products @ pw[i] + row.triple_all
                continue
            keep_biased = row.H_pair & (pw[i] >= 0)
            pair_terms = np.where(row.H_pair, np.where(keep_biased, row.biased_products, 0.0), row.products)
            b2 = row.triple_biased_weight
            mi2 = self.mult[..., i] ** 2
            has_h3 = bool(row.H_triple.any())
            triple = row.triple_unbiased + (np.maximum(b2, 0.0) * mi2 if has_h3 else 0.0)
            total = total + pair_terms @ pw[i] + triple
            failed_triples += row.failed_triples
            biased_pairs += int(row.H_pair.sum())
            biased_triples += int(row.H_triple.sum())
            causing += int(has_h3)
            g_removals = g_removals + int((row.H_pair & (pw[i] < 0)).sum()) + (
                (b2 < 0).astype(int) if has_h3 else 0
            )
        diag = VarianceDiagnostics(
            failed_pairs=int(np.count_nonzero(~self.pos2 & ~self._eye)) // 2,
            failed_triples=failed_triples // 6,
            biased_pairs=biased_pairs,
            biased_triples=biased_triples,
            g_removals=g_removals,
            causing_observations=causing,
            n=self.n,
        )
        return total, diag


def _resolve_engine(engine: str) -> str:
    if engine == "auto":
        return "numba" if _fastkernel.AVAILABLE else "numpy"
    if engine == "numba" and not _fastkernel.AVAILABLE:
        raise ImportError("numba is not installed; use engine='numpy'")
    if engine not in ("numba", "numpy"):
        raise ValueError(f"unknown engine {engine!r}")
    return engine


def _incomplete():
    return TripleRankFailure("some leave-two-out or leave-three-out design is rank deficient")


def _estimate(cache: ProjectionCache, Y, demeaned: bool, robust: bool, engine: str):
    """Variance estimates for outcome rows ``Y`` (..., n) and per-row diagnostics."""
    engine = _resolve_engine(engine)
    Y = cache.y if Y is None else np.asarray(Y, dtype=float)
    if engine == "numpy":
        value, diag = LeaveOutKernel(cache, Y, demeaned=demeaned).estimate(robust=robust)
        return np.asarray(value), diag
    cache.check_leverage()
    batch_shape = Y.shape[:-1]
    Y2 = Y.reshape(-1, cache.n)
    D2 = pair_determinants(cache)
    pos2 = D2 > cache.thresholds.d_pair
    np.fill_diagonal(pos2, False)
    uv = uv_weights(cache)
    values, stats = _fastkernel.variance_batch(
        cache.M, D2, pos2, uv.U - uv.V**2, uv.V, Y2 @ cache.M, multipliers(Y2, demeaned),
        cache.thresholds.d_triple, robust,
    )
    if not robust and stats[:, _fastkernel.INCOMPLETE].any():
        raise _incomplete()
    first = stats[0]
    diag = VarianceDiagnostics(
        failed_pairs=int(np.count_nonzero(~pos2 & ~np.eye(cache.n, dtype=bool))) // 2,
        failed_triples=int(first[_fastkernel.FAILED_TRIPLES]) // 6,
        biased_pairs=int(first[_fastkernel.BIASED_PAIRS]),
        biased_triples=int(first[_fastkernel.BIASED_TRIPLES]),
        g_removals=stats[:, _fastkernel.G_REMOVALS].reshape(batch_shape) if batch_shape else int(first[_fastkernel.G_REMOVALS]),
        causing_observations=int(first[_fastkernel.CAUSING]),
        n=cache.n,
    )
    return values.reshape(batch_shape), diag


def vf_unbiased(cache: ProjectionCache, demeaned: bool = False, engine: str = "auto") -> VarianceEstimate:
    """Unbiased leave-three-out variance estimator; needs every D_ij, D_ijk above threshold."""
    value, _ = _estimate(cache, None, demeaned, False, engine)
    return VarianceEstimate(float(value), VariancePath.UNBIASED, VarianceDiagnostics(n=cache.n))


def vf_general(cache: ProjectionCache, demeaned: bool = True, engine: str = "auto") -> VarianceEstimate:
    """Variance estimator that stays defined when leave-two/three-out designs lose rank."""
    value, diag = _estimate(cache, None, demeaned, True, engine)
    diag = replace(diag, g_removals=int(diag.g_removals))
    return VarianceEstimate(float(value), VariancePath.ROBUST, diag)


def vf_batch(cache: ProjectionCache, Y, demeaned: bool = False, robust: bool = False,
             engine: str = "auto") -> np.ndarray:
    """Variance estimates for a stack of outcome vectors sharing the design in ``cache``."""
    value, _ = _estimate(cache, Y, demeaned, robust, engine)
    return value


def vf_positive_fallback(cache: ProjectionCache, demeaned: bool = True) -> VarianceEstimate:
    """Squared (demeaned) outcomes in place of every error variance; never negative."""
    uv = uv_weights(cache)
    s = multipliers(cache.y, demeaned) ** 2
    w = np.maximum(uv.U - uv.V**2, 0.0)
    np.fill_diagonal(w, 0.0)
    lin = uv.V @ multipliers(cache.y, demeaned)
    value = float(s @ w @ s + (lin**2) @ s)
    return VarianceEstimate(value, VariancePath.FALLBACK, VarianceDiagnostics(n=cache.n))


def variance_product_row(cache: ProjectionCache, i: int, demeaned: bool = False, Y=None) -> np.ndarray:
    """Unbiased estimates of ``sigma_i^2 sigma_j^2`` for every ``j`` (entry ``i`` is meaningless)."""
    row = LeaveOutKernel(cache, Y, demeaned=demeaned).row(i)
    if not row.complete:
        raise TripleRankFailure(f"observation {i} belongs to a rank-deficient leave-three-out triple")
    return row.products


def variance_product(cache: ProjectionCache, i: int, j: int, demeaned: bool = False) -> float:
    if i == j:
        raise RepeatedIndices("variance product needs i != j")
    return float(variance_product_row(cache, i, demeaned)[j])


class TripleCause(NamedTuple):
    failed: bool
    caused_by_i: bool
    caused_by_j: bool
    caused_by_k: bool


def classify_triple(cache: ProjectionCache, i: int, j: int, k: int) -> TripleCause:
    """Which observations cause a leave-three-out failure of (i, j, k)."""
    t = cache.thresholds
    D3 = triple_determinant(cache, i, j, k)
    if D3 > t.d_triple:
        return TripleCause(False, False, False, False)
    pos = {
        frozenset(p): pair_determinant(cache, *p) > t.d_pair
        for p in ((i, j), (i, k), (j, k))
    }

    def caused(a, b, c):
        return pos[frozenset((b, c))] or not (pos[frozenset((a, b))] and pos[frozenset((a, c))])

    return TripleCause(True, caused(i, j, k), caused(j, i, k), caused(k, i, j))


def bar_sigma(cache: ProjectionCache, i: int, j: int, k: int, demeaned: bool = True) -> float:
    """Leave-three-out variance estimate of observation ``i`` with its rank-failure replacements.

    ``j == k`` gives the leave-two-out version.
    """
    t = cache.thresholds
    mi = float(multipliers(cache.y, demeaned)[i])
    if cache.M[i, i] <= t.leverage:
        raise LeverageOne([i])
    if j != k:
        if triple_determinant(cache, i, j, k) > t.d_triple:
            return mi * l3o_residual(cache, i, j, k)
        if (pair_determinant(cache, j, k) <= t.d_pair
                and pair_determinant(cache, i, j) > t.d_pair
                and pair_determinant(cache, i, k) > t.d_pair):
            return mi * l2o_residual(cache, i, j)
        return mi * mi
    if pair_determinant(cache, i, j) > t.d_pair:
        return mi * l2o_residual(cache, i, j)
    return mi * mi
