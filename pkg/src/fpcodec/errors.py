"""Exception hierarchy shared across the codec."""


class FpcodecError(Exception):
    """Base class for all codec errors."""


class GeometryError(FpcodecError):
    """Invalid level, dimension, or shape relationship."""


class FpfFormatError(FpcodecError):
    """Base class for feature-pyramid file errors."""


class FpfBadMagic(FpfFormatError):
    pass


class FpfTruncated(FpfFormatError):
    pass


class FpfDimMismatch(FpfFormatError):
    pass


class ConfigError(FpcodecError):
    """Inconsistent model or run configuration."""


class BitstreamError(FpcodecError):
    """Base class for compressed-stream container errors."""


class StreamBadMagic(BitstreamError):
    pass


class StreamBadVersion(BitstreamError):
    pass


class StreamCrcMismatch(BitstreamError):
    pass


class StreamTruncated(BitstreamError):
    pass


class CoderError(FpcodecError):
    """Entropy coder misuse or corrupt payload."""
