"""Leave-out algebra for OLS.

Everything here is derived from the residual projection matrix
``M = I - X (X'X)^{-1} X'``.  Leave-one, -two and -three-out residuals are
obtained from ``M`` and the full-sample residuals through rank-update
identities, so no OLS refit is ever performed.

Observation indices are zero-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from lotest.errors import (
    DimensionMismatch,
    EqualIndices,
    IndexOutOfRange,
    LeverageOne,
    PairRankFailure,
    RankDeficientDesign,
    RankDeficientRestriction,
    RepeatedIndices,
    TripleRankFailure,
)

#: relative singular value cut-off used for X and R rank checks
RANK_RTOL = 1e-10


@dataclass(frozen=True)
class Thresholds:
    """Numerical zero cut-offs for leave-out determinants.

    ``d_pair`` and ``d_triple`` decide whether a leave-two-out or
    leave-three-out design is treated as rank deficient; ``leverage`` is the
    cut-off for ``M_ii``.
    """

    d_pair: float = 1e-4
    d_triple: float = 1e-6
    leverage: float = 1e-8


DEFAULT_THRESHOLDS = Thresholds()


@dataclass(frozen=True)
class RegressionSample:
    """Outcomes ``y`` (n,) and regressors ``X`` (n, m)."""

    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1:
            raise DimensionMismatch(f"y must be a vector, got shape {y.shape}")
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"X must be an (n, m) matrix with n = len(y) = {y.shape[0]}, got shape {X.shape}"
            )
        n, m = X.shape
        if not n > m >= 1:
            raise DimensionMismatch(f"need n > m >= 1, got n={n}, m={m}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise ValueError("y and X must be finite")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class HypothesisSpec:
    """Linear restrictions ``R beta = q`` with ``R`` of shape (r, m)."""

    R: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        if R.ndim != 2 or q.ndim != 1 or R.shape[0] != q.shape[0]:
            raise DimensionMismatch(f"R must be (r, m) and q (r,), got {R.shape} and {q.shape}")
        r, m = R.shape
        if not 1 <= r <= m:
            raise DimensionMismatch(f"need 1 <= r <= m, got r={r}, m={m}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(q))):
            raise ValueError("R and q must be finite")
        s = np.linalg.svd(R, compute_uv=False)
        if s[-1] <= RANK_RTOL * s[0]:
            raise RankDeficientRestriction(f"R does not have full row rank {r}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "q", q)

    @property
    def r(self) -> int:
        return self.R.shape[0]

    @classmethod
    def zero_coefficients(cls, m: int, columns) -> "HypothesisSpec":
        """H0: the coefficients in ``columns`` are all zero."""
        columns = list(columns)
        R = np.zeros((len(columns), m))
        R[np.arange(len(columns)), columns] = 1.0
        return cls(R, np.zeros(len(columns)))


@dataclass(frozen=True)
class ProjectionCache:
    """OLS fit plus the projection matrices needed by the leave-out estimators.

    Immutable after construction; all methods are pure reads.
    """

    y: np.ndarray
    X: np.ndarray
    R: np.ndarray
    sxx_inv: np.ndarray
    beta_hat: np.ndarray
    resid: np.ndarray
    M: np.ndarray
    B: np.ndarray
    sigma2_eps: float
    rxx: np.ndarray
    rxx_inv: np.ndarray
    thresholds: Thresholds = field(default=DEFAULT_THRESHOLDS)
    # X S_xx^{-1} R', shared by B, the weight matrix and the Wald statistics
    XSR: np.ndarray = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return self.R.shape[0]

    @property
    def M_diag(self) -> np.ndarray:
        return np.diagonal(self.M)

    @property
    def B_diag(self) -> np.ndarray:
        return np.diagonal(self.B)

    def with_outcome(self, y) -> "ProjectionCache":
        """Same design and hypothesis, new outcome vector."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.y.shape:
            raise DimensionMismatch(f"expected y of shape {self.y.shape}, got {y.shape}")
        beta_hat = self.sxx_inv @ (self.X.T @ y)
        resid = self.M @ y
        sigma2 = float(resid @ resid) / (self.n - self.m)
        return ProjectionCache(
            y=y, X=self.X, R=self.R, sxx_inv=self.sxx_inv, beta_hat=beta_hat, resid=resid,
            M=self.M, B=self.B, sigma2_eps=sigma2, rxx=self.rxx, rxx_inv=self.rxx_inv,
            thresholds=self.thresholds, XSR=self.XSR,
        )

    def check_leverage(self) -> None:
        bad = np.flatnonzero(self.M_diag <= self.thresholds.leverage)
        if bad.size:
            raise LeverageOne(bad)


def build_projection(sample: RegressionSample, hyp: HypothesisSpec,
                     thresholds: Thresholds = DEFAULT_THRESHOLDS) -> ProjectionCache:
    """Fit OLS and assemble ``M``, ``B`` and the inverse design matrices."""
    X, y = sample.X, sample.y
    n, m = X.shape
    if hyp.R.shape[1] != m:
        raise DimensionMismatch(f"R has {hyp.R.shape[1]} columns but X has {m}")

    Q, T = np.linalg.qr(X)
    s = np.linalg.svd(T, compute_uv=False)
    if s[-1] <= RANK_RTOL * s[0]:
        raise RankDeficientDesign(f"X does not have full column rank {m}")

    T_inv = linalg.solve_triangular(T, np.eye(m))
    sxx_inv = T_inv @ T_inv.T
    sxx_inv = (sxx_inv + sxx_inv.T) / 2
    beta_hat = linalg.solve_triangular(T, Q.T @ y)

    M = -(Q @ Q.T)
    M[np.diag_indices(n)] += 1.0
    M = (M + M.T) / 2
    resid = M @ y

    SR = sxx_inv @ hyp.R.T
    rxx = hyp.R @ SR
    rxx = (rxx + rxx.T) / 2
    rxx_inv = np.linalg.inv(rxx)
    rxx_inv = (rxx_inv + rxx_inv.T) / 2
    XSR = X @ SR
    B = XSR @ rxx_inv @ XSR.T
    B = (B + B.T) / 2

    return ProjectionCache(
        y=y, X=X, R=hyp.R, sxx_inv=sxx_inv, beta_hat=beta_hat, resid=resid, M=M, B=B,
        sigma2_eps=float(resid @ resid) / (n - m), rxx=rxx, rxx_inv=rxx_inv,
        thresholds=thresholds, XSR=XSR,
    )


def _check_index(cache: ProjectionCache, *idx: int) -> None:
    for i in idx:
        if not 0 <= i < cache.n:
            raise IndexOutOfRange(f"index {i} outside [0, {cache.n})")


def pair_determinant(cache: ProjectionCache, i: int, j: int) -> float:
    """``D_ij = M_ii M_jj - M_ij^2``; zero iff dropping i and j kills full rank."""
    _check_index(cache, i, j)
    if i == j:
        raise EqualIndices(f"pair determinant needs i != j, got {i}")
    M = cache.M
    return float(M[i, i] * M[j, j] - M[i, j] ** 2)


def pair_determinants(cache: ProjectionCache) -> np.ndarray:
    """All ``D_ij`` as an (n, n) matrix with zero diagonal."""
    d = cache.M_diag
    D = np.multiply.outer(d, d) - cache.M**2
    np.fill_diagonal(D, 0.0)
    return D


def triple_determinant(cache: ProjectionCache, i: int, j: int, k: int) -> float:
    """3x3 principal minor of ``M`` on rows/columns (i, j, k)."""
    _check_index(cache, i, j, k)
    if len({i, j, k}) < 3:
        raise RepeatedIndices(f"triple determinant needs distinct indices, got {(i, j, k)}")
    M = cache.M
    Djk = M[j, j] * M[k, k] - M[j, k] ** 2
    return float(
        M[i, i] * Djk
        - (M[j, j] * M[i, k] ** 2 + M[k, k] * M[i, j] ** 2 - 2 * M[j, k] * M[i, j] * M[i, k])
    )


def triple_determinant_slab(cache: ProjectionCache, i: int, D2: np.ndarray | None = None) -> np.ndarray:
    """``D_ijk`` over all (j, k) for fixed ``i``; rows/columns ``i`` and the diagonal are ~0."""
    M = cache.M
    d = cache.M_diag
    if D2 is None:
        D2 = pair_determinants(cache)
    Mi = M[i]
    Mi2 = Mi**2
    return M[i, i] * D2 - (np.multiply.outer(d, Mi2) + np.multiply.outer(Mi2, d)) + 2 * M * np.multiply.outer(Mi, Mi)


def loo_residual(cache: ProjectionCache, i: int) -> float:
    """``y_i - x_i' beta_{-i}``."""
    _check_index(cache, i)
    Mii = cache.M[i, i]
    if Mii <= cache.thresholds.leverage:
        raise LeverageOne([i])
    return float(cache.resid[i] / Mii)


def loo_residuals(cache: ProjectionCache) -> np.ndarray:
    cache.check_leverage()
    return cache.resid / cache.M_diag


def l2o_residual(cache: ProjectionCache, i: int, j: int) -> float:
    """``y_i - x_i' beta_{-ij}``."""
    D = pair_determinant(cache, i, j)
    if D <= cache.thresholds.d_pair:
        raise PairRankFailure(f"D_({i},{j}) = {D:.3g} is below the pair threshold")
    M, e = cache.M, cache.resid
    return float((M[j, j] * e[i] - M[i, j] * e[j]) / D)


def l3o_residual(cache: ProjectionCache, i: int, j: int, k: int) -> float:
    """``y_i - x_i' beta_{-ijk}`` via the leave-two-out residuals of j and k."""
    D3 = triple_determinant(cache, i, j, k)
    if D3 <= cache.thresholds.d_triple:
        raise TripleRankFailure(f"D_({i},{j},{k}) = {D3:.3g} is below the triple threshold")
    M, e = cache.M, cache.resid
    Djk = M[j, j] * M[k, k] - M[j, k] ** 2
    # D_ijk > 0 implies D_jk > 0; multiply through by D_jk to avoid a second division
    num = e[i] * Djk - M[i, j] * (M[k, k] * e[j] - M[j, k] * e[k]) - M[i, k] * (M[j, j] * e[k] - M[j, k] * e[j])
    return float(num / D3)


def l2o_residual_matrix(M: np.ndarray, e: np.ndarray, D2: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """``E[..., a, b] = y_a - x_a' beta_{-ab}`` for every pair flagged ``valid``; 0 elsewhere.

    ``e`` may carry leading batch dimensions.
    """
    d = np.diagonal(M)
    num = e[..., :, None] * d[None, :] - M * e[..., None, :]
    safe = np.where(valid, D2, 1.0)
    return np.where(valid, num / safe, 0.0)
