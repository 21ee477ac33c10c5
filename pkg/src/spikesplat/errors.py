"""Exception types raised across the package."""


class SpikeSplatError(Exception):
    """Base class for every error raised by spikesplat."""


class InvalidParameterError(SpikeSplatError, ValueError):
    """A value is outside the domain an operation accepts."""


class ValidationError(SpikeSplatError, ValueError):
    """A configuration or input document failed validation."""


class FormatError(SpikeSplatError, ValueError):
    """A file could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass
