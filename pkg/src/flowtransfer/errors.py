"""Exception hierarchy shared by every module.

The CLI maps each family to its own exit code, so callers should raise the
narrowest class that fits.
"""


class FlowTransferError(Exception):
    """Base class for all package errors."""


class SpecificationError(FlowTransferError, ValueError):
    """An architecture or generator description violates its invariants."""


class ContractError(FlowTransferError, ValueError):
    """A caller broke an operation's preconditions (shapes, ranges, ordering)."""


class DataError(FlowTransferError, ValueError):
    """Input values are unusable (non-finite, negative flow, gaps)."""


class IngestError(DataError):
    """A flow CSV or manifest could not be parsed."""


class FitError(DataError):
    """A normalizer could not be fitted."""


class CorruptFileError(FlowTransferError):
    """A model file has a bad header, truncated payload or failed checksum."""


class ConfigError(FlowTransferError):
    """A key-value configuration file is missing keys or holds bad values."""
