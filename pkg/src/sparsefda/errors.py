"""Exception hierarchy shared across the package.

Every error that can surface through the CLI maps to a process exit code:

* 2 -- configuration problems (bad flags, malformed config files)
* 3 -- data / schema problems (missing columns, duplicate records,
       misaligned subject sets, grid mismatches)
* 4 -- numerical degeneracy (rank-deficient local fits, nonpositive
       variances, singular systems, no usable bandwidth)
* 5 -- bootstrap instability (too many failed replicates)
"""

from __future__ import annotations


class SparseFdaError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SparseFdaError):
    """Invalid run configuration (CLI flags or config file)."""

    exit_code = 2


class SchemaError(SparseFdaError):
    """Input table violates the declared schema."""

    exit_code = 3


class DuplicateRecordError(SchemaError):
    """Duplicate (subject, variable, time) rows in a longitudinal table."""

    def __init__(self, offenders: list[tuple[str, str, float]]):
        self.offenders = offenders
        shown = ", ".join(
            f"({s!r}, {v!r}, t={t!r})" for s, v, t in offenders[:5]
        )
        more = "" if len(offenders) <= 5 else f" (+{len(offenders) - 5} more)"
        super().__init__(f"duplicate records: {shown}{more}")


class DataError(SparseFdaError):
    """Structurally valid input that cannot be used as requested."""

    exit_code = 3


class AlignmentError(DataError):
    """Subject sets of two inputs do not overlap as required."""


class GridMismatchError(DataError):
    """Dense input is not on the model grid; resample before scoring."""


class ExtrapolationError(DataError):
    """Evaluation requested outside the fitted window."""


class NumericError(SparseFdaError):
    """Numerical degeneracy detected during estimation."""

    exit_code = 4


class LocalRankError(NumericError):
    """A local fit has no usable points at some evaluation location."""

    def __init__(self, point, detail: str = ""):
        self.point = point
        msg = f"local fit is rank deficient at {point!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DegenerateVarianceError(NumericError):
    """A variance that must be positive is not."""

    def __init__(self, where, value: float | None = None):
        self.where = where
        self.value = value
        msg = f"nonpositive variance at {where!r}"
        if value is not None:
            msg += f" (value={value!r})"
        super().__init__(msg)


class DegenerateScalarError(NumericError):
    """A scalar covariate or sample has (near-)zero variance."""


class DegenerateCovarianceError(NumericError):
    """Covariance surface admits no positive eigenvalue."""


class InsufficientPairsError(NumericError):
    """Not enough off-diagonal raw covariance pairs to smooth a surface."""


class NoValidBandwidthError(NumericError):
    """Every cross-validation candidate bandwidth failed."""


class RankDeficiencyError(NumericError):
    """Design matrix is rank deficient."""

    def __init__(self, columns: list[str]):
        self.columns = columns
        super().__init__(
            "design matrix is rank deficient; collinear columns: "
            + ", ".join(columns)
        )


class AssemblyError(NumericError):
    """A covariance component needed by a pointwise system is missing."""

    def __init__(self, pair: tuple[str, str]):
        self.pair = pair
        super().__init__(f"missing covariance component for pair {pair!r}")


class BootstrapInstabilityError(SparseFdaError):
    """More than the tolerated share of bootstrap replicates failed."""

    exit_code = 5

    def __init__(self, failed: int, total: int, last_error: str = ""):
        self.failed = failed
        self.total = total
        msg = f"bootstrap unstable: {failed}/{total} replicates failed"
        if last_error:
            msg += f" (last error: {last_error})"
        super().__init__(msg)


def exit_code_for(exc: BaseException) -> int:
    """Exit code the CLI should use for ``exc``."""
    if isinstance(exc, SparseFdaError):
        return exc.exit_code
    return 1
