"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError (and subclasses) -> 3, NumericError -> 4.
"""


class AutoSeg3DError(Exception):
    """Base class for all package errors."""


class ConfigError(AutoSeg3DError):
    """Invalid or inconsistent configuration."""


class DataError(AutoSeg3DError):
    """Problem with input data or on-disk artifacts."""


class FormatError(DataError):
    """Unreadable or malformed file; message names the offending field."""


class CheckpointImportError(DataError):
    """Archive entry missing or shape-mismatched; message names the entry."""


class PlacementError(DataError):
    """Phantom organ could not be placed disjointly; names the organ index."""


class SamplingError(DataError):
    """Patch sampling request cannot be satisfied."""


class ShapeError(AutoSeg3DError):
    """Array shape violates an operation's contract."""


class ContractError(AutoSeg3DError):
    """Caller violated a numeric precondition (e.g. unnormalized probs)."""


class NumericError(AutoSeg3DError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""
