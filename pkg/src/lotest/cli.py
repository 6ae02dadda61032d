"""Command-line interface: ``lotest test`` and ``lotest simulate``.

Exit codes: 0 when the command ran (whatever the test decision), 2 for
invalid input, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from lotest.algebra import HypothesisSpec, RegressionSample, Thresholds, build_projection
from lotest.errors import (
    DimensionMismatch,
    LoTestError,
    RankDeficientDesign,
    RankDeficientRestriction,
)
from lotest.fbar import DEFAULT_DRAWS
from lotest.lo_test import SCHEMA_VERSION, TestOptions, check_alpha, reports_for_alphas
from lotest.simulation import DesignConfig, run_monte_carlo

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
INTERCEPT = "(intercept)"


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _default_seed() -> int:
    raw = os.environ.get("LOTEST_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise InputError(f"LOTEST_SEED must be an integer, got {raw!r}") from None


def parse_alphas(text: str) -> list[float]:
    try:
        alphas = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise InputError(f"cannot parse alpha list {text!r}") from None
    if not alphas:
        raise InputError("at least one alpha is required")
    return alphas


def read_data(path: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read a CSV with header; first column is the outcome, the rest regressors."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read data file: {exc}") from None
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise InputError("data file needs a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    values = np.empty((len(rows) - 1, len(header)))
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"row {lineno} has {len(row)} fields, header has {len(header)}")
        for col, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise InputError(f"row {lineno}, column {header[col]!r}: not a number: {cell!r}") from None
            if not math.isfinite(v):
                raise InputError(f"row {lineno}, column {header[col]!r}: non-finite value {cell!r}")
            values[lineno - 2, col] = v
    return header[1:], values[:, 0], values[:, 1:]


def read_hypothesis(path: str, names: list[str]) -> HypothesisSpec:
    """Parse ``{"R": ..., "q": ...}`` or ``{"zero_coefs": [names]}`` against design columns ``names``."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read hypothesis file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"hypothesis file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InputError("hypothesis must be a JSON object")
    m = len(names)
    shorthand = doc.get("zero_coefs", doc.get("zero_coefficients"))
    if shorthand is not None:
        unknown = [c for c in shorthand if c not in names]
        if unknown:
            raise InputError(f"unknown column(s) in hypothesis: {unknown}")
        if not shorthand:
            raise InputError("zero_coefs must name at least one column")
        return HypothesisSpec.zero_coefficients(m, [names.index(c) for c in shorthand])
    if "R" not in doc or "q" not in doc:
        raise InputError('hypothesis needs either "R" and "q" or "zero_coefs"')
    try:
        R = np.atleast_2d(np.asarray(doc["R"], dtype=float))
        q = np.atleast_1d(np.asarray(doc["q"], dtype=float))
    except (TypeError, ValueError):
        raise InputError("R and q must be numeric") from None
    if names and names[0] == INTERCEPT and R.shape[1] == m - 1:
        # R given over the data columns only: the intercept is unrestricted
        R = np.column_stack([np.zeros(R.shape[0]), R])
    return HypothesisSpec(R, q)


def _summary(reports, names, hyp) -> str:
    first = reports[0]
    lines = [
        f"F = {first.f_stat:.6g}   E_hat = {first.e_hat:.6g}   "
        f"V_hat = {first.v_hat.value:.6g} ({first.v_hat.path.value})",
        f"r = {hyp.r}, columns = {len(names)}",
    ]
    for rep in reports:
        verdict = "reject" if rep.reject else "do not reject"
        lines.append(f"alpha = {rep.alpha:g}: critical value {rep.critical_value:.6g} -> {verdict}")
    return "\n".join(lines)


def cmd_test(args) -> int:
    names, y, X = read_data(args.data)
    if not args.no_intercept:
        X = np.column_stack([np.ones(len(y)), X])
        names = [INTERCEPT] + names
    if X.shape[1] == 0:
        raise InputError("no regressors: add columns or drop --no-intercept")
    hyp = read_hypothesis(args.hypothesis, names)
    alphas = parse_alphas(args.alpha)
    try:
        for a in alphas:
            check_alpha(a, args.allow_large_alpha)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    seed = _default_seed() if args.seed is None else args.seed
    thresholds = Thresholds(d_pair=args.d_pair, d_triple=args.d_triple)
    opts = TestOptions(
        alpha=max(alphas), quantile_draws=args.draws, seed=seed, demeaned=not args.raw,
        thresholds=thresholds, allow_large_alpha=args.allow_large_alpha, engine=args.engine,
    )
    t0 = time.perf_counter()
    cache = build_projection(RegressionSample(y, X), hyp, thresholds)
    reports = reports_for_alphas(cache, hyp, alphas, opts)
    out = {
        "schema": SCHEMA_VERSION,
        "n": cache.n,
        "m": cache.m,
        "r": cache.r,
        "columns": names,
        "seed": seed,
        "demeaned": not args.raw,
        "results": [r.to_dict() for r in reports],
    }
    _write(args.out, json.dumps(out, indent=2) + "\n")
    print(_summary(reports, names, hyp))
    if args.verbose:
        print(f"elapsed {time.perf_counter() - t0:.3f} s", file=sys.stderr)
    return EXIT_OK


def _load_configs(path: str) -> list[DesignConfig]:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file is not valid JSON: {exc}") from None
    items = raw.get("cells", [raw]) if isinstance(raw, dict) else raw
    try:
        return [DesignConfig.from_dict(item) for item in items]
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None


def cmd_simulate(args) -> int:
    configs = _load_configs(args.config)
    reports = []
    for cfg in configs:
        t0 = time.perf_counter()
        reports.append(run_monte_carlo(cfg, threads=args.threads))
        if args.verbose:
            print(f"{cfg.design.value} n={cfg.n}: {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    if args.table:
        text = reports[0].to_csv()
        for rep in reports[1:]:
            text += rep.to_csv().split("\n", 1)[1]
    else:
        payload = reports[0].to_dict() if len(reports) == 1 else {
            "schema": 1, "cells": [r.to_dict() for r in reports]
        }
        text = json.dumps(payload, indent=2) + "\n"
    _write(args.out, text)
    for rep in reports:
        cfg = rep.config
        lo = ", ".join(f"{a:g}: {rep.rate('LO', a):.3f}" for a in cfg.alphas)
        print(f"{cfg.design.value} n={cfg.n} r={cfg.r} zeta={cfg.zeta:g} LO rejection rates {lo}")
    return EXIT_OK


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise InputError(f"cannot write output: {exc}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lotest", description="Leave-out F test for linear regressions under heteroskedasticity.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", help="run the leave-out F test on a CSV data set")
    t.add_argument("--data", required=True, help="CSV file: header, outcome first, then regressors")
    t.add_argument("--hypothesis", required=True, help='JSON: {"R": [[..]], "q": [..]} or {"zero_coefs": [..]}')
    t.add_argument("--alpha", default="0.05", help="nominal size(s), comma separated")
    t.add_argument("--seed", type=int, default=None, help="quantile simulation seed (default $LOTEST_SEED or 0)")
    t.add_argument("--out", required=True, help="path of the JSON report")
    t.add_argument("--no-intercept", action="store_true", help="do not add an intercept column")
    t.add_argument("--raw", action="store_true", help="use raw instead of demeaned outcomes in the estimators")
    t.add_argument("--draws", type=int, default=DEFAULT_DRAWS, help="F-bar draws for the quantile")
    t.add_argument("--d-pair", type=float, default=1e-4, help="pair determinant threshold")
    t.add_argument("--d-triple", type=float, default=1e-6, help="triple determinant threshold")
    t.add_argument("--allow-large-alpha", action="store_true", help="permit alpha above 0.31")
    t.add_argument("--engine", choices=["auto", "numba", "numpy"], default="auto",
                   help="variance kernel implementation")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run a Monte Carlo size/power study")
    s.add_argument("--config", required=True, help="JSON design config (one cell, a list, or {\"cells\": [...]})")
    s.add_argument("--out", required=True)
    s.add_argument("--table", action="store_true", help="write a flat CSV table instead of JSON")
    s.add_argument("--threads", type=int, default=1, help="worker processes")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, DimensionMismatch, RankDeficientDesign, RankDeficientRestriction) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (LoTestError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
