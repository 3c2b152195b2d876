"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, MrcFormatError -> 3,
NumericalError -> 4.
"""


class CryoclassError(Exception):
    """Base class for all cryoclass errors."""


class ConfigError(CryoclassError):
    """Invalid configuration file, key, or cross-field constraint."""


class MrcFormatError(CryoclassError):
    """Malformed MRC file or sidecar."""

    def __init__(self, message, byte_offset=None, path=None):
        detail = message
        if byte_offset is not None:
            detail += f" (at byte {byte_offset})"
        if path is not None:
            detail += f" [{path}]"
        super().__init__(detail)
        self.byte_offset = byte_offset
        self.path = path


class UnsupportedModeError(MrcFormatError):
    """MRC mode other than 2 (float32)."""


class NonSquareError(MrcFormatError):
    """nx != ny in an MRC header."""


class NumericalError(CryoclassError):
    """A linear solve or factorization failed beyond recovery."""
