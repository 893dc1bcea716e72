"""Exception taxonomy shared by every module, mapped to CLI exit codes."""


class GrafuseError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(GrafuseError):
    """Invalid configuration: bad flag value, unknown key, out-of-range rate."""

    exit_code = 1


class DataError(GrafuseError):
    """Invalid or missing data artifact: bundle, checkpoint, raw file."""

    exit_code = 2


class NumericError(GrafuseError):
    """Numeric failure at runtime: divergence, NaN loss, non-finite input."""

    exit_code = 3


class ShapeError(GrafuseError):
    """Operand shapes incompatible with the requested operation."""

    exit_code = 1


class DomainError(GrafuseError):
    """Value outside the mathematical domain of the operation."""

    exit_code = 3


class ContractError(GrafuseError):
    """API precondition violated by the caller."""

    exit_code = 1


class DegenerateRowError(GrafuseError):
    """A softmax row has no unmasked entries to normalize over."""

    exit_code = 3


class BundleError(DataError):
    """Graph bundle failed structural validation; message names the field."""
