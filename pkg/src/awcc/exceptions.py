"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class ConfigError(Exception):
    """Invalid configuration: unknown keys, bad values, incompatible presets."""


class CheckpointError(ConfigError):
    """Unusable checkpoint: bad magic, version mismatch, checksum failure."""


class DataError(Exception):
    """Dataset problems: unreadable files, malformed annotations, bad points."""


class AnnotationError(DataError):
    """A specific annotation line failed to parse or validate."""


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite during optimization."""
