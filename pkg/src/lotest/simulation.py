"""Monte Carlo study of size and power for the leave-out test and its benchmarks.

Two regression designs are available.  In the *continuous* design every
regressor is a log-normal draw scaled by a shared factor ``0.5 + u_i``; in the
*mixed* design the last ``r`` regressors are instead dummies for ``r + 1``
groups whose assignment also depends on ``u_i``.  Errors are
``sigma_i * N(0, 1)`` with ``sigma_i`` increasing in the sum of the regressors
when ``zeta > 0``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from lotest.algebra import HypothesisSpec, RegressionSample, build_projection
from lotest.benchmarks import Variant, exact_f_tests, wald_tests
from lotest.fbar import DEFAULT_DRAWS
from lotest.lo_test import TestOptions, reports_for_alphas

E = math.e
SQRT_E = math.exp(0.5)
DEFAULT_ALPHAS = (0.01, 0.05, 0.10)
TESTS = ("LO", "EF", "W1", "WK", "WL")
# draws used to normalize the heteroskedasticity profile
PROFILE_DRAWS = 1_000_000
PROFILE_SEED = 20_160_817
_PROFILE_CHUNK = 10_000


class Design(str, enum.Enum):
    CONTINUOUS = "continuous"
    MIXED = "mixed"


class Alternative(str, enum.Enum):
    NULL = "null"
    SPARSE = "sparse"
    DENSE = "dense"


@dataclass(frozen=True)
class DesignConfig:
    """One cell of the simulation grid.

    ``r_rule`` is ``"many"`` (0.6 n), ``"few"`` (3), ``"mixed"`` (0.15 n) or
    an explicit integer; ``"auto"`` picks ``"many"`` or ``"mixed"`` by design.
    """

    n: int = 160
    design: Design = Design.CONTINUOUS
    r_rule: str | int = "auto"
    zeta: float = 0.0
    r2_target: float = 0.16
    alternative: Alternative = Alternative.NULL
    reps: int = 2000
    seed: int = 0
    alphas: tuple = DEFAULT_ALPHAS
    quantile_draws: int = DEFAULT_DRAWS

    def __post_init__(self):
        object.__setattr__(self, "design", Design(self.design))
        object.__setattr__(self, "alternative", Alternative(self.alternative))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not 0 <= self.zeta <= 2:
            raise ValueError(f"zeta must lie in [0, 2], got {self.zeta}")
        if not 0 <= self.r2_target < 1:
            raise ValueError(f"r2_target must lie in [0, 1), got {self.r2_target}")
        if self.reps < 1:
            raise ValueError("reps must be positive")
        if not 0 < self.r < self.m < self.n:
            raise ValueError(f"need 0 < r < m < n, got r={self.r}, m={self.m}, n={self.n}")
        if self.design is Design.MIXED and self.m - self.r < 1:
            raise ValueError("mixed design needs at least the intercept besides the dummies")

    @property
    def m(self) -> int:
        return int(round(0.8 * self.n))

    @property
    def r(self) -> int:
        rule = self.r_rule
        if rule == "auto":
            rule = "mixed" if self.design is Design.MIXED else "many"
        if rule == "many":
            return int(round(0.6 * self.n))
        if rule == "few":
            return 3
        if rule == "mixed":
            return int(round(0.15 * self.n))
        return int(rule)

    @property
    def n_continuous(self) -> int:
        """Number of continuous regressors, excluding the intercept."""
        return self.m - 1 - (self.r if self.design is Design.MIXED else 0)

    @classmethod
    def from_dict(cls, data: dict) -> "DesignConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["design"] = self.design.value
        d["alternative"] = self.alternative.value
        d["alphas"] = list(self.alphas)
        return d


@dataclass(frozen=True)
class SimulatedSample:
    sample: RegressionSample
    hyp: HypothesisSpec
    beta: np.ndarray
    sigma: np.ndarray
    groups: np.ndarray | None = None
    dropped_observations: int = 0


def calibrate_rho(cfg: DesignConfig) -> float:
    """Common null coefficient of the continuous regressors giving the target R^2."""
    k = cfg.m - (cfg.r if cfg.design is Design.MIXED else 0)
    r2 = cfg.r2_target
    return math.sqrt(r2 / (1 - r2) * 12 / (13 * E**2 + (k - 14) * E)) / math.sqrt(k - 1)


def group_probabilities(r: int) -> np.ndarray:
    """Probability of each of the ``r + 1`` groups."""
    ell = np.arange(1, r + 2)
    return np.sqrt(0.25 + 2 * ell / (r + 1)) - np.sqrt(0.25 + 2 * (ell - 1) / (r + 1))


def expected_sxx(cfg: DesignConfig) -> np.ndarray:
    """Expected ``X'X`` for the design (intercept first, tested block last)."""
    k = cfg.n_continuous
    m = cfg.m
    S = np.zeros((m, m))
    S[0, 0] = 1.0
    S[0, 1:k + 1] = S[1:k + 1, 0] = SQRT_E
    S[1:k + 1, 1:k + 1] = 13 / 12 * E + 13 / 12 * E * (E - 1) * np.eye(k)
    if cfg.design is Design.MIXED:
        r = cfg.r
        sdd = group_probabilities(r)[:r]
        S[0, k + 1:] = S[k + 1:, 0] = sdd
        S[1:k + 1, k + 1:] = S[k + 1:, 1:k + 1] = SQRT_E / (r + 1)
        S[k + 1:, k + 1:] = np.diag(sdd)
    return cfg.n * S


def null_coefficients(cfg: DesignConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(beta, q)`` under the null."""
    rho = calibrate_rho(cfg)
    k = cfg.n_continuous
    beta = np.zeros(cfg.m)
    beta[0] = 1 - k * rho * SQRT_E
    beta[1:k + 1] = rho
    q = beta[-cfg.r:].copy()
    return beta, q


def alternative_direction(cfg: DesignConfig) -> np.ndarray:
    r, n = cfg.r, cfg.n
    delta = np.zeros(r)
    if cfg.alternative is Alternative.NULL:
        return delta
    if cfg.design is Design.CONTINUOUS:
        if cfg.alternative is Alternative.SPARSE:
            delta[-1] = 0.5 * math.sqrt(n)
        else:
            delta[:] = 0.5 * math.sqrt(n) / math.sqrt(r)
    else:
        if cfg.alternative is Alternative.SPARSE:
            delta[-1] = 6.0
        else:
            delta[:] = 1.5
    return delta


def apply_alternative(cfg: DesignConfig, beta_null: np.ndarray, sxx: np.ndarray) -> np.ndarray:
    """Shift the tested coefficients by ``chol(R E[S]^-1 R') delta``."""
    delta = alternative_direction(cfg)
    if not delta.any():
        return beta_null.copy()
    r = cfg.r
    cov = np.linalg.inv(sxx)[-r:, -r:]
    L = np.linalg.cholesky((cov + cov.T) / 2)
    beta = beta_null.copy()
    beta[-r:] += L @ delta
    return beta


def _continuous_block(n: int, k: int, rng: np.random.Generator):
    u = rng.uniform(size=n)
    x = (0.5 + u)[:, None] * rng.lognormal(size=(n, k))
    return u, x


def heteroskedasticity_index(design: Design, r: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sum of the continuous regressors, plus a shifted ``u_i`` term standing in for the dummies."""
    s = x.sum(axis=1)
    if design is Design.MIXED:
        s = s + 2 * r * SQRT_E * u
    return s


@lru_cache(maxsize=32)
def _profile_scale(design: Design, k: int, r: int, zeta: float) -> float:
    rng = np.random.default_rng(PROFILE_SEED)
    total = 0.0
    for start in range(0, PROFILE_DRAWS, _PROFILE_CHUNK):
        size = min(_PROFILE_CHUNK, PROFILE_DRAWS - start)
        u, x = _continuous_block(size, k, rng)
        s = heteroskedasticity_index(design, r, x, u)
        total += float(np.sum((1 + s) ** (2 * zeta)))
    return 1.0 / math.sqrt(total / PROFILE_DRAWS)


def profile_scale(cfg: DesignConfig) -> float:
    """``z_zeta`` making the population mean of ``sigma_i^2`` one."""
    if cfg.zeta == 0:
        return 1.0
    return _profile_scale(cfg.design, cfg.n_continuous, cfg.r, float(cfg.zeta))


def sigma_profile(cfg: DesignConfig, s: np.ndarray) -> np.ndarray:
    return profile_scale(cfg) * (1 + np.asarray(s)) ** cfg.zeta


def _outcomes(cfg: DesignConfig, X, u, x, beta, rng):
    sigma = sigma_profile(cfg, heteroskedasticity_index(cfg.design, cfg.r, x, u))
    y = X @ beta + sigma * rng.standard_normal(cfg.n)
    return y, sigma


def gen_continuous(cfg: DesignConfig, rng: np.random.Generator) -> SimulatedSample:
    n, k = cfg.n, cfg.n_continuous
    u, x = _continuous_block(n, k, rng)
    X = np.column_stack([np.ones(n), x])
    beta_null, q = null_coefficients(cfg)
    beta = apply_alternative(cfg, beta_null, expected_sxx(cfg))
    y, sigma = _outcomes(cfg, X, u, x, beta, rng)
    R = np.zeros((cfg.r, cfg.m))
    R[:, -cfg.r:] = np.eye(cfg.r)
    return SimulatedSample(RegressionSample(y, X), HypothesisSpec(R, q), beta, sigma)


def assign_groups(u: np.ndarray, r: int) -> np.ndarray:
    """Group labels in ``1..r+1``; label ``r + 1`` is the base group."""
    g = np.ceil((r + 1) * (u + u * u) / 2).astype(int)
    return np.clip(g, 1, r + 1)


def gen_mixed(cfg: DesignConfig, rng: np.random.Generator) -> SimulatedSample:
    """Mixed design; singleton groups are pruned so no observation has leverage one.

    An observation alone in its group is fitted perfectly by its dummy, so it
    is dropped along with the dummy.  If the base group disappears another
    group takes its place.  The hypothesis (all group effects equal) keeps
    its meaning, with ``r`` reduced by the number of dropped groups.
    """
    n, k, r = cfg.n, cfg.n_continuous, cfg.r
    u, x = _continuous_block(n, k, rng)
    groups = assign_groups(u, r)
    D = (groups[:, None] == np.arange(1, r + 1)[None, :]).astype(float)
    X = np.column_stack([np.ones(n), x, D])
    beta_null, q = null_coefficients(cfg)
    beta = apply_alternative(cfg, beta_null, expected_sxx(cfg))
    y, sigma = _outcomes(cfg, X, u, x, beta, rng)

    counts = np.bincount(groups, minlength=r + 2)
    keep_obs = counts[groups] >= 2
    present = [g for g in range(1, r + 2) if counts[g] >= 2]
    base = r + 1 if counts[r + 1] >= 2 else present[-1]
    dummies = [g for g in present if g != base]
    g_kept = groups[keep_obs]
    Xk = np.column_stack([
        np.ones(keep_obs.sum()), x[keep_obs],
        (g_kept[:, None] == np.array(dummies, dtype=int)[None, :]).astype(float),
    ])
    r_kept = len(dummies)
    R = np.zeros((r_kept, Xk.shape[1]))
    R[:, -r_kept:] = np.eye(r_kept)
    return SimulatedSample(
        RegressionSample(y[keep_obs], Xk), HypothesisSpec(R, np.zeros(r_kept)),
        beta, sigma[keep_obs], g_kept, int(n - keep_obs.sum()),
    )


def generate(cfg: DesignConfig, rng: np.random.Generator) -> SimulatedSample:
    return gen_continuous(cfg, rng) if cfg.design is Design.CONTINUOUS else gen_mixed(cfg, rng)


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


@dataclass(frozen=True)
class RepOutcome:
    rejections: dict  # test -> tuple of bools per alpha (None when the test was skipped)
    negative_variance: bool
    rank_failure_fraction: float
    small_group_fraction: float
    wk_failure: str | None


def run_replication(cfg: DesignConfig, rep: int) -> RepOutcome:
    sim = generate(cfg, rep_rng(cfg.seed, rep))
    cache = build_projection(sim.sample, sim.hyp)
    opts = TestOptions(alpha=max(cfg.alphas), quantile_draws=cfg.quantile_draws, seed=cfg.seed)
    reports = reports_for_alphas(cache, sim.hyp, cfg.alphas, opts)
    rej = {"LO": tuple(rep_.reject for rep_ in reports)}
    rej["EF"] = tuple(b.reject for b in exact_f_tests(cache, sim.hyp, cfg.alphas, cfg.quantile_draws, cfg.seed))
    wk_failure = None
    for v in (Variant.W1, Variant.WK, Variant.WL):
        res = wald_tests(cache, sim.hyp, cfg.alphas, v, cfg.quantile_draws, cfg.seed)
        if v is Variant.WK:
            wk_failure = res[0].failure
        rej[v.value] = None if res[0].failure == "singular_hadamard" else tuple(b.reject for b in res)
    small = 0.0
    if sim.groups is not None:
        counts = np.bincount(sim.groups)
        small = float(np.mean((counts[sim.groups] == 2) | (counts[sim.groups] == 3)))
    return RepOutcome(
        rejections=rej,
        negative_variance=reports[0].diagnostics.negative_variance_fallback,
        rank_failure_fraction=reports[0].diagnostics.rank_failure_fraction,
        small_group_fraction=small,
        wk_failure=wk_failure,
    )


@dataclass(frozen=True)
class Rate:
    rate: float
    se: float
    count: int
    reps: int


@dataclass
class SimulationReport:
    config: DesignConfig
    rates: dict = field(default_factory=dict)  # test -> {alpha: Rate}
    pct_negative_vf: float = 0.0
    avg_rank_failure_fraction: float = 0.0
    avg_small_group_fraction: float = 0.0
    reps_completed: int = 0
    wk_failures: int = 0

    def rate(self, test: str, alpha: float) -> float:
        return self.rates[test][float(alpha)].rate

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "config": self.config.to_dict(),
            "reps_completed": self.reps_completed,
            "pct_negative_vf": self.pct_negative_vf,
            "avg_rank_failure_fraction": self.avg_rank_failure_fraction,
            "avg_small_group_fraction": self.avg_small_group_fraction,
            "wk_failures": self.wk_failures,
            "rates": {
                t: {f"{a:g}": asdict(rt) for a, rt in per.items()} for t, per in self.rates.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table_rows(self) -> list[dict]:
        cfg = self.config
        return [
            {
                "design": cfg.design.value, "n": cfg.n, "r": cfg.r, "zeta": cfg.zeta, "test": t,
                "alpha": a, "rate": rt.rate, "se": rt.se, "pct_vneg": self.pct_negative_vf,
                "rank_fail_frac": self.avg_rank_failure_fraction,
            }
            for t, per in self.rates.items() for a, rt in per.items()
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["design", "n", "r", "zeta", "test", "alpha", "rate", "se", "pct_vneg", "rank_fail_frac"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        w.writerows(self.table_rows())
        return buf.getvalue()


def _run_chunk(args) -> list[RepOutcome]:
    cfg, reps = args
    return [run_replication(cfg, rep) for rep in reps]


def aggregate(cfg: DesignConfig, outcomes: list[RepOutcome]) -> SimulationReport:
    rates = {}
    for t in TESTS:
        per = {}
        for ai, a in enumerate(cfg.alphas):
            hits = [o.rejections[t][ai] for o in outcomes if o.rejections[t] is not None]
            k, N = int(sum(hits)), len(hits)
            p = k / N if N else float("nan")
            per[a] = Rate(p, math.sqrt(p * (1 - p) / N) if N else float("nan"), k, N)
        rates[t] = per
    N = len(outcomes)
    return SimulationReport(
        config=cfg,
        rates=rates,
        pct_negative_vf=100.0 * sum(o.negative_variance for o in outcomes) / N,
        avg_rank_failure_fraction=math.fsum(o.rank_failure_fraction for o in outcomes) / N,
        avg_small_group_fraction=math.fsum(o.small_group_fraction for o in outcomes) / N,
        reps_completed=N,
        wk_failures=sum(o.wk_failure is not None for o in outcomes),
    )


def run_monte_carlo(cfg: DesignConfig, threads: int = 1) -> SimulationReport:
    """Run ``cfg.reps`` replications; the report does not depend on ``threads``."""
    reps = list(range(cfg.reps))
    if threads <= 1:
        outcomes = _run_chunk((cfg, reps))
    else:
        size = max(1, math.ceil(len(reps) / (4 * threads)))
        chunks = [(cfg, reps[i:i + size]) for i in range(0, len(reps), size)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = [o for part in pool.map(_run_chunk, chunks) for o in part]
    return aggregate(cfg, outcomes)
