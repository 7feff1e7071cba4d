"""Exception classes shared across the package."""


class MemxbarError(Exception):
    """Base class for every error raised by memxbar."""


class ConfigurationError(MemxbarError, ValueError):
    """Invalid dimensions, variability parameters or controller settings."""


class DimensionError(MemxbarError, ValueError):
    """Vector or matrix has the wrong length/shape."""


class RangeError(MemxbarError, ValueError):
    """A value (coordinate, input component, amplitude) is out of range."""


class ProtocolError(MemxbarError):
    """A wire-level failure reported by the firmware endpoint.

    ``code`` is one of ``PARSE``, ``RANGE``, ``DIM``, ``STATE``.
    """

    def __init__(self, code, detail=""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class BackendUnavailableError(MemxbarError):
    """The transport behind a protocol backend failed or closed."""


class TrainingError(MemxbarError):
    """Optimizer failed to converge or diverged.

    Carries the last iterate and its KKT residual (when meaningful) so
    callers can inspect how far off the result was.
    """

    def __init__(self, message, last_iterate=None, kkt_residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.kkt_residual = kkt_residual


class DegenerateDataError(MemxbarError, ValueError):
    """Data carries no usable spread (constant columns, empty splits)."""


class IngestionError(MemxbarError, ValueError):
    """A CSV file violates its documented schema."""
