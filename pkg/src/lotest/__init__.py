"""Leave-out F test for many linear restrictions under heteroskedasticity."""

from lotest.algebra import HypothesisSpec, RegressionSample, Thresholds, build_projection
from lotest.lo_test import LoTestReport, TestOptions, reports_for_alphas, run_lo_test

__version__ = "0.1.0"

__all__ = [
    "HypothesisSpec",
    "LoTestReport",
    "RegressionSample",
    "TestOptions",
    "Thresholds",
    "build_projection",
    "reports_for_alphas",
    "run_lo_test",
]
