"""The F-bar distribution: weighted chi-squared(1) sum over an independent chi-squared(df)/df.

Equal weights give Snedecor's F, ``df = inf`` gives the chi-bar-squared
distribution.  Quantiles are order statistics of a simulated sample.  The
sample is generated in fixed-size blocks, each from its own stream keyed by
``(seed, block index)``, so the draws do not depend on how blocks are
scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DEFAULT_DRAWS = 49_999
BLOCK_SIZE = 8192


@dataclass(frozen=True)
class FBarSpec:
    weights: np.ndarray
    df: float

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"weights must sum to one, got {w.sum()!r}")
        if not self.df > 0:
            raise ValueError(f"df must be positive, got {self.df!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "df", float(self.df))

    @property
    def r(self) -> int:
        return self.weights.size

    @classmethod
    def snedecor(cls, r: int, df: float) -> "FBarSpec":
        return cls(np.full(r, 1.0 / r), df)


@dataclass(frozen=True)
class QuantileRequest:
    tau: float
    draws: int = DEFAULT_DRAWS
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau!r}")
        if self.draws < 1:
            raise ValueError("draws must be positive")


def _block_components(r: int, df: float, size: int, rng: np.random.Generator):
    """Squared normals (size, r) and the chi-squared(df)/df denominators."""
    z = rng.standard_normal((size, r))
    if math.isinf(df):
        denom = np.ones(size)
    else:
        denom = 2.0 * rng.standard_gamma(df / 2.0, size) / df
    return z * z, denom


def _sample_block(spec: FBarSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    z2, denom = _block_components(spec.r, spec.df, size, rng)
    return (z2 @ spec.weights) / denom


# base draws are reused across weight vectors when they fit in this many floats
_CACHE_LIMIT = 10_000_000


@lru_cache(maxsize=4)
def _base_draws(r: int, df: float, draws: int, seed: int):
    parts = [
        _block_components(r, df, min(BLOCK_SIZE, draws - start), block_rng(seed, b))
        for b, start in enumerate(range(0, draws, BLOCK_SIZE))
    ]
    z2 = np.concatenate([p[0] for p in parts])
    denom = np.concatenate([p[1] for p in parts])
    z2.setflags(write=False)
    denom.setflags(write=False)
    return z2, denom


def sample_fbar(spec: FBarSpec, rng: np.random.Generator) -> float:
    """One draw of ``sum_l w_l Z_l / (Z_0 / df)``."""
    return float(_sample_block(spec, 1, rng)[0])


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))


def fbar_draws(spec: FBarSpec, draws: int = DEFAULT_DRAWS, seed: int = 0) -> np.ndarray:
    """``draws`` F-bar realizations; bit-identical for equal (spec, draws, seed).

    Specs sharing ``(r, df)`` and the seed share the underlying chi-squared
    draws, which is what makes quantiles for several weight vectors cheap.
    """
    if spec.r * draws <= _CACHE_LIMIT:
        z2, denom = _base_draws(spec.r, spec.df, draws, seed)
        return (z2 @ spec.weights) / denom
    out = np.empty(draws)
    for b, start in enumerate(range(0, draws, BLOCK_SIZE)):
        stop = min(start + BLOCK_SIZE, draws)
        out[start:stop] = _sample_block(spec, stop - start, block_rng(seed, b))
    return out


def order_rank(tau: float, draws: int) -> int:
    """1-based rank ``ceil(tau (draws + 1))`` clipped to ``[1, draws]``."""
    # the small slack keeps e.g. 0.95 * 50000 from rounding up to 47501
    k = math.ceil(tau * (draws + 1) - 1e-9)
    return min(max(k, 1), draws)


def quantiles_from_draws(sample: np.ndarray, taus) -> np.ndarray:
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    ranks = [order_rank(t, sample.size) - 1 for t in taus]
    return np.partition(sample, sorted(set(ranks)))[ranks]


def quantile_fbar(spec: FBarSpec, req: QuantileRequest) -> float:
    return float(quantiles_from_draws(fbar_draws(spec, req.draws, req.seed), [req.tau])[0])


def fbar_quantiles(spec: FBarSpec, taus, draws: int = DEFAULT_DRAWS, seed: int = 0) -> np.ndarray:
    """Several quantiles from one shared simulated sample."""
    return quantiles_from_draws(fbar_draws(spec, draws, seed), taus)


@lru_cache(maxsize=256)
def _snedecor_quantiles(r: int, df: float, taus: tuple, draws: int, seed: int) -> tuple:
    return tuple(fbar_quantiles(FBarSpec.snedecor(r, df), taus, draws, seed))


def snedecor_quantiles(r: int, df: float, taus, draws: int = DEFAULT_DRAWS, seed: int = 0) -> np.ndarray:
    """Simulated F_{r,df} quantiles (``df = inf`` gives chi2_r / r); memoized."""
    taus = tuple(float(t) for t in np.atleast_1d(taus))
    return np.array(_snedecor_quantiles(int(r), float(df), taus, int(draws), int(seed)))


def normal_limit_transform(spec: FBarSpec, quantile: float) -> float:
    """Center at the limiting mean 1 and scale by the limiting standard deviation."""
    return (quantile - 1.0) / math.sqrt(2.0 * float(spec.weights @ spec.weights) + 2.0 / spec.df)
