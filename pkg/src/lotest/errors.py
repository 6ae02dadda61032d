"""Exception hierarchy for the leave-out test."""


class LoTestError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(LoTestError, ValueError):
    pass


class RankDeficientDesign(LoTestError):
    """The regressor matrix does not have full column rank."""


class RankDeficientRestriction(LoTestError):
    """The restriction matrix does not have full row rank."""


class IndexOutOfRange(LoTestError, IndexError):
    pass


class EqualIndices(LoTestError, ValueError):
    pass


class RepeatedIndices(EqualIndices):
    pass


class LeverageOne(LoTestError):
    """Some observation has M_ii at (numerical) zero, i.e. it alone identifies a parameter."""

    def __init__(self, indices, message=None):
        self.indices = tuple(int(i) for i in indices)
        if message is None:
            shown = ", ".join(str(i) for i in self.indices[:10])
            more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
            message = f"observations with leverage one: {shown}{more}"
        super().__init__(message)


class PairRankFailure(LoTestError):
    """Leaving the pair out makes the design rank deficient (D_ij below threshold)."""


class TripleRankFailure(LoTestError):
    """Leaving a triple out makes the design rank deficient (D_ijk below threshold)."""


class DegenerateWeights(LoTestError):
    """Every eigenvalue of the estimated weight matrix is non-positive."""


class SingularMiddleMatrix(LoTestError):
    """The heteroskedasticity-robust covariance of R beta_hat cannot be inverted."""


class SingularSquaredProjection(SingularMiddleMatrix):
    """The entrywise square of M cannot be inverted, so the WK variances do not exist."""
