#!/usr/bin/env python3
"""
Exception types shared by the landmark toolkit.
Library code raises these; the command-line entry point maps them to exit codes.
"""


class LandmarkError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(LandmarkError, ValueError):
    """Operand shapes do not line up."""


class ConfigurationError(LandmarkError, ValueError):
    """A layer, model or run configuration is not self-consistent."""


class ContractError(LandmarkError):
    """A caller broke an operation's precondition (e.g. backward on a non-scalar)."""


class NumericError(LandmarkError, ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class CatalogLookupError(LandmarkError, KeyError):
    """Unknown model catalog identifier."""


class DatasetLoadError(LandmarkError):
    """An annotation row or image could not be loaded."""

    def __init__(self, message: str, row: int = None):
        self.row = row
        prefix = f"row {row}: " if row is not None else ""
        super().__init__(f"{prefix}{message}")


class CorruptCheckpointError(LandmarkError):
    """Checkpoint manifest and blobs disagree."""


class UsageError(LandmarkError):
    """Bad command-line flag or config key."""

    def __init__(self, message: str, key: str = None):
        self.key = key
        super().__init__(message)
