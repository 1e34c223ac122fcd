"""Exception hierarchy shared by the whole package.

Library code raises these; only the command-line layer turns them into exit codes.
"""


class SLNetError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class ConfigError(SLNetError):
    """Invalid or unreadable pipeline configuration."""

    exit_code = 2


class DataError(SLNetError):
    """Malformed data: bad magic, truncated payload, out-of-grid indices, scene mismatch."""

    exit_code = 3


class ShapeError(DataError):
    """Tensor shapes that do not fit a layer or operation contract."""


class NumericError(DataError):
    """Non-finite values caught by the debug finiteness check."""


class CheckpointError(SLNetError):
    """Corrupt checkpoint, wrong training stage or missing branch."""

    exit_code = 4


class FingerprintWarning(UserWarning):
    """A checkpoint was written under a different data-shaping configuration."""
