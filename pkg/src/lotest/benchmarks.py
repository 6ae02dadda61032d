"""Comparison tests: the exact F test and heteroskedasticity-robust Wald tests.

Wald variants differ only in the per-observation variance plugged into the
sandwich ``A' diag(s) A`` with ``A = X S^-1 R'``:

* ``W1``: squared residuals with a degrees-of-freedom correction ``n / (n - m)``
* ``WL``: leave-one-out estimates ``y_i (y_i - x_i' beta_{-i})``
* ``WK``: the solution ``s`` of ``(M * M) s = e**2`` (entrywise square of ``M``)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from lotest.algebra import HypothesisSpec, ProjectionCache
from lotest.errors import SingularMiddleMatrix, SingularSquaredProjection
from lotest.fbar import DEFAULT_DRAWS, snedecor_quantiles
from lotest.lo_test import f_statistic

#: reciprocal condition number below which a matrix is treated as singular
SINGULAR_RCOND = 1e-12


class Variant(str, enum.Enum):
    EXACT_F = "ExactF"
    W1 = "W1"
    WK = "WK"
    WL = "WL"


@dataclass(frozen=True)
class BenchmarkResult:
    statistic: float
    critical: float
    reject: bool
    variant: Variant
    alpha: float
    failure: str | None = None  # "singular_middle" counts as non-rejection; "singular_hadamard" skips WK


def _is_singular(A: np.ndarray) -> bool:
    s = np.linalg.svd(A, compute_uv=False)
    return not s[-1] > SINGULAR_RCOND * s[0]


def robust_variances(cache: ProjectionCache, variant: Variant) -> np.ndarray:
    e = cache.resid
    n, m = cache.n, cache.m
    if variant is Variant.W1:
        return e**2 * n / (n - m)
    if variant is Variant.WL:
        cache.check_leverage()
        return cache.y * e / cache.M_diag
    if variant is Variant.WK:
        MM = cache.M**2
        if _is_singular(MM):
            raise SingularSquaredProjection("entrywise square of M is singular")
        return np.linalg.solve(MM, e**2)
    raise ValueError(f"{variant} is not a Wald variant")


def sandwich_wald(cache: ProjectionCache, hyp: HypothesisSpec, variances: np.ndarray) -> float:
    """Wald statistic with the given per-observation error variances."""
    A = cache.XSR
    middle = A.T @ (A * np.asarray(variances)[:, None])
    middle = (middle + middle.T) / 2
    if _is_singular(middle):
        raise SingularMiddleMatrix("covariance of R beta_hat is singular")
    diff = cache.R @ cache.beta_hat - hyp.q
    return float(diff @ np.linalg.solve(middle, diff))


def wald_statistic(cache: ProjectionCache, hyp: HypothesisSpec, variant: Variant) -> float:
    return sandwich_wald(cache, hyp, robust_variances(cache, Variant(variant)))


def exact_f_tests(cache: ProjectionCache, hyp: HypothesisSpec, alphas, draws: int = DEFAULT_DRAWS,
                  seed: int = 0) -> list[BenchmarkResult]:
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    f = f_statistic(cache, hyp)
    crit = snedecor_quantiles(cache.r, float(cache.n - cache.m), 1.0 - alphas, draws, seed)
    return [BenchmarkResult(f, float(c), bool(f > c), Variant.EXACT_F, float(a)) for a, c in zip(alphas, crit)]


def exact_f_test(cache: ProjectionCache, hyp: HypothesisSpec, alpha: float, draws: int = DEFAULT_DRAWS,
                 seed: int = 0) -> BenchmarkResult:
    """``F`` against the simulated ``F_{r, n-m}`` quantile."""
    return exact_f_tests(cache, hyp, [alpha], draws, seed)[0]


def wald_tests(cache: ProjectionCache, hyp: HypothesisSpec, alphas, variant: Variant,
               draws: int = DEFAULT_DRAWS, seed: int = 0) -> list[BenchmarkResult]:
    variant = Variant(variant)
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    # chi2_r quantile = r times the chi2_r / r quantile
    crit = cache.r * snedecor_quantiles(cache.r, np.inf, 1.0 - alphas, draws, seed)
    try:
        w = wald_statistic(cache, hyp, variant)
        failure = None
    except SingularSquaredProjection:
        w, failure = float("nan"), "singular_hadamard"
    except SingularMiddleMatrix:
        w, failure = float("nan"), "singular_middle"
    return [
        BenchmarkResult(w, float(c), bool(failure is None and w > c), variant, float(a), failure)
        for a, c in zip(alphas, crit)
    ]


def wald_test(cache: ProjectionCache, hyp: HypothesisSpec, alpha: float, variant: Variant,
              draws: int = DEFAULT_DRAWS, seed: int = 0) -> BenchmarkResult:
    """Robust Wald statistic against the simulated chi-squared(r) quantile."""
    return wald_tests(cache, hyp, [alpha], variant, draws, seed)[0]
