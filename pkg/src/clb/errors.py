"""Exception taxonomy shared across the engine.

Everything raised on purpose derives from EngineError so the CLI can catch one
base class and map failures to exit codes: validation-shaped errors (config,
protocol, file format, budgets, ranges) exit 1, runtime failures exit 2.
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EngineError):
    """Tensor or image extents do not line up."""


class LabelError(EngineError):
    """A class label is outside the valid index range."""


class GraphError(EngineError):
    """Backward was requested on something with no computation graph."""


class NumericError(EngineError):
    """A NaN or Inf appeared where only finite values are allowed."""


class FormatError(EngineError):
    """A binary file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class RangeError(EngineError):
    """A value falls outside a fixed table or catalog."""


class ProtocolError(EngineError):
    """Task or problem construction constraints are violated."""


class BudgetError(EngineError):
    """A frame budget exceeds what the clip can supply."""


class ConfigError(EngineError):
    """Invalid or inconsistent configuration."""


class EstimationError(EngineError):
    """A statistical estimate was requested on an empty sample set."""


class AggregationError(EngineError):
    """Aggregation over an empty report set."""


class EmptyBufferError(EngineError):
    """A replay sample was requested from an empty buffer."""
