"""Exception types shared across the package."""


class LatmcError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(LatmcError):
    """Invalid experiment configuration."""


class ContractError(LatmcError):
    """A caller violated an API contract (e.g. mismatched matrices)."""


class CalibrationError(LatmcError):
    """Preconditioner calibration or factorization failed."""


class RankDeficiencyError(CalibrationError):
    """Calibration sample does not pin down a unique coupling matrix."""


class NumericGuardError(LatmcError):
    """A non-finite quantity appeared where a finite one is required."""


class EnumerationBudgetError(LatmcError):
    """Exact enumeration request exceeds the configured budget."""


class SupportMismatchError(LatmcError):
    """Two probability tables do not share the same support."""


class UndefinedESSError(LatmcError):
    """Between-chain variance is zero, leaving the ESS estimator undefined."""


class InvalidStateError(LatmcError):
    """Chain state outside the lattice support, or zero-probability reference value."""
