"""Exception hierarchy shared across the package.

CLI exit codes map onto these classes, so keep the taxonomy flat: one class
per user-distinguishable failure mode.
"""


class BevPilotError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(BevPilotError, ValueError):
    """A caller-supplied value violates an operation's contract."""


class ScenarioError(BevPilotError):
    """Scene generation could not satisfy its own invariants."""


class DatasetError(BevPilotError):
    """Base class for problems in serialized files (datasets, checkpoints)."""


class VersionMismatchError(DatasetError):
    """File declares a format version this code does not read."""


class TruncatedFileError(DatasetError):
    """File ends before the declared content does."""


class ChecksumError(DatasetError):
    """A CRC32 check failed; the message names the offending record."""


class DivergenceError(BevPilotError):
    """Training produced a non-finite loss or gradient."""


class UnsupportedVariantError(BevPilotError):
    """The requested operation does not apply to this model variant."""
