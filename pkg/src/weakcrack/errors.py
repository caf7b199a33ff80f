"""Typed errors, mapped to CLI exit codes in cli.py."""


class WeakCrackError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(WeakCrackError):
    """Bad config file, unknown key, or invalid override. Exit code 2."""


class DataError(WeakCrackError):
    """Missing or malformed dataset / input files. Exit code 3."""


class CheckpointError(DataError):
    """Unreadable, missing or incompatible checkpoint. Exit code 3."""


class NumericalError(WeakCrackError):
    """Training diverged past the retry budget. Exit code 4."""
