"""Exception taxonomy shared across the package."""


class MclError(Exception):
    """Base class for every error raised by mclkit."""


class ConfigurationError(MclError):
    """Invalid configuration: bad shapes, unknown kinds, out-of-range settings."""


class InputError(MclError):
    """Invalid data handed to an operation (labels out of range, empty splits)."""


class StateError(MclError):
    """Operation invoked in the wrong lifecycle state."""


class NumericError(MclError):
    """Non-finite values encountered during computation."""


class FormatError(MclError):
    """Malformed bytes in an external file."""


class CompatibilityError(FormatError):
    """File is well-formed but written by an incompatible version."""


class UnsupportedMethodError(MclError):
    """Requested analysis does not apply to the trained method."""
