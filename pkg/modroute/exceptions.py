"""
Error hierarchy for the modroute package.

Every error raised on purpose by the package derives from ModrouteError, and
most also derive from the builtin exception a caller would naturally catch
(ValueError for bad inputs, RuntimeError for failed runs).
"""


class ModrouteError(Exception):
    """Base class for all package errors."""


class ShapeError(ModrouteError, ValueError):
    """Operand shapes do not satisfy an operation's shape rule."""


class IndexRangeError(ModrouteError, IndexError):
    """A token id or projector index falls outside its valid range."""


class NonFiniteError(ModrouteError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(ModrouteError, RuntimeError):
    """Backward was requested on something the active graph cannot differentiate."""


class RoutingError(ModrouteError, ValueError):
    """Invalid router input (unknown strategy, non-positive temperature, ...)."""


class LossError(ModrouteError, ValueError):
    """A loss received inputs outside its domain."""


class MetricError(ModrouteError, ValueError):
    """A metric received an empty or degenerate input."""


class CorpusError(ModrouteError, ValueError):
    """Invalid corpus specification, split request or corpus file."""


class CheckpointError(ModrouteError, RuntimeError):
    """Checkpoint missing, corrupt, or incompatible with the requested run."""


class TrainingError(ModrouteError, RuntimeError):
    """Training aborted (non-finite loss, divergence, missing gradient)."""


class ConfigError(ModrouteError, ValueError):
    """Configuration file or override could not be parsed or validated."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno
