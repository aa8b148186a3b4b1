"""Exception types shared across the package and mapped to CLI exit codes."""


class SpectralSdeError(Exception):
    """Base class for package errors."""


class DimensionError(SpectralSdeError, ValueError):
    """Shapes of inputs do not agree with the declared dimensions."""


class SingularBasisError(SpectralSdeError, ValueError):
    """Eigenbasis is singular or too ill-conditioned to invert."""


class DefectiveOperatorError(SpectralSdeError, ValueError):
    """Operator is defective or has (nearly) repeated eigenvalues."""


class SingularInnovationError(SpectralSdeError, ValueError):
    """Innovation covariance is singular even after jitter escalation."""


class ConfigError(SpectralSdeError, ValueError):
    """Invalid configuration or benchmark spec (CLI exit code 2)."""


class DataError(SpectralSdeError, ValueError):
    """Invalid or corrupt dataset (CLI exit code 3)."""


class NumericalError(SpectralSdeError, RuntimeError):
    """Numerical failure such as a NaN loss (CLI exit code 4)."""
