"""Exception hierarchy shared by every stage.

The CLI maps :class:`SelenormError` subclasses to a categorized error line
and exit status 1; anything else is treated as a crash.
"""


class SelenormError(Exception):
    category = "error"


class DimensionError(SelenormError, ValueError):
    category = "dimension"


class BoundsError(SelenormError, IndexError):
    category = "bounds"


class CoverageError(SelenormError, ValueError):
    category = "coverage"

    def __init__(self, message, uncovered=None):
        super().__init__(message)
        self.uncovered = uncovered if uncovered is not None else []


class ParameterError(SelenormError, ValueError):
    category = "parameter"


class ConfigurationError(SelenormError, ValueError):
    category = "configuration"


class ShapeError(SelenormError, ValueError):
    category = "shape"


class EmptyDomainError(SelenormError, ValueError):
    category = "empty-domain"


class DegenerateReferenceError(SelenormError, ValueError):
    category = "degenerate-reference"


class RasterFormatError(SelenormError, ValueError):
    category = "raster-format"


class CheckpointError(SelenormError):
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    category = "checkpoint-version"


class NonFiniteLossError(SelenormError, FloatingPointError):
    category = "non-finite-loss"

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PartialOutputError(SelenormError, IOError):
    """Raised when a writer fails mid-run; ``next_band`` is where to resume."""

    category = "partial-output"

    def __init__(self, message, next_band=0, written=None):
        super().__init__(message)
        self.next_band = next_band
        self.written = written or []
