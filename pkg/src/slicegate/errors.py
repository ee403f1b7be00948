"""Exception taxonomy shared across the package.

The CLI maps each family to a distinct exit code, so raising the right
class matters more than the message text.
"""


class SlicegateError(Exception):
    """Base class for all package errors."""


class ConfigError(SlicegateError):
    """Invalid configuration: bad value, unknown key, missing field."""


class DataError(SlicegateError):
    """Dataset problems: missing files, bad format, empty sample pools."""


class VolumeFormatError(DataError):
    """SVOL container violations: bad magic, truncation, version mismatch."""


class NumericError(SlicegateError):
    """Non-finite values, shape mismatches, or failed numeric contracts."""


class UnknownClassError(SlicegateError):
    """Prompted with a class name outside the vocabulary."""
