"""Exception hierarchy shared across the package."""


class SpikeSCRError(Exception):
    """Base class for all package errors."""


class DimensionError(SpikeSCRError, ValueError):
    """Tensor shapes or geometry are incompatible."""


class ConfigurationError(SpikeSCRError, ValueError):
    """A configuration value violates its invariants."""


class ParseError(SpikeSCRError, ValueError):
    """A file does not match its documented format."""


class ValidationError(SpikeSCRError, ValueError):
    """Data parsed correctly but is semantically invalid (e.g. label out of range)."""


class AccountingError(SpikeSCRError):
    """Energy accounting is missing a required quantity."""


class OracleError(SpikeSCRError, ValueError):
    """An oracle received input outside its domain."""


class DivergenceError(SpikeSCRError, ArithmeticError):
    """Training produced a non-finite loss."""


class DescriptorError(AccountingError, ValueError):
    """A layer descriptor names an unsupported kind or inconsistent geometry."""
