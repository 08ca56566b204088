"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, SchemaError and
DependencyError -> 3, EstimationError and its subclasses -> 4.
"""


class CreditScanError(Exception):
    """Base class for all package errors."""


class ConfigError(CreditScanError):
    """Invalid or inconsistent configuration."""


class SchemaError(CreditScanError):
    """Input table does not match its documented schema."""


class DependencyError(CreditScanError):
    """A pipeline stage was run before the stage it depends on."""


class EstimationError(CreditScanError):
    """A model could not be estimated."""


class EmptySampleError(EstimationError):
    """No rows with positive weight remain."""


class RankDeficientError(EstimationError):
    """Design matrix is rank deficient."""

    def __init__(self, columns, message=None):
        self.columns = tuple(columns)
        if message is None:
            message = "design matrix is rank deficient; collinear columns: " + ", ".join(
                self.columns
            )
        super().__init__(message)


class ConvergenceError(EstimationError):
    """Alternating-projection demeaning failed to converge."""

    def __init__(self, residual, iterations, tol):
        self.residual = residual
        self.iterations = iterations
        self.tol = tol
        super().__init__(
            f"fixed-effect demeaning did not converge after {iterations} sweeps: "
            f"max group mean {residual:.3e} > tol {tol:.3e}"
        )


class TooFewClustersError(EstimationError):
    """Cluster-robust covariance requires at least two clusters."""


class UnderidentifiedError(EstimationError):
    """Fewer instruments than endogenous regressors."""
