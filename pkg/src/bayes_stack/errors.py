"""Exception and warning types shared across the package."""


class BayesStackError(Exception):
    """Base class for all package-specific errors."""


class DataError(BayesStackError):
    """Invalid, inconsistent, or missing input data."""


class SchemaError(DataError):
    """Required columns are missing or a file has the wrong structure."""


class SplitError(DataError):
    """A time split left one side empty."""


class AlignmentError(DataError):
    """Rows could not be aligned by date."""


class MetricError(DataError):
    """A metric is undefined for the given inputs."""


class DivergenceError(BayesStackError):
    """Numerical divergence inside a leapfrog trajectory."""


class SamplingError(BayesStackError):
    """A chain produced too many divergent transitions."""


class ConvergenceError(BayesStackError):
    """Post-sampling diagnostics failed the convergence gate."""


class DataWarning(UserWarning):
    """Non-fatal data issue: rejected rows, excluded groups, degenerate values."""
