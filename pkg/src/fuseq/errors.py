"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class DimensionError(EngineError):
    """Operand shapes do not conform."""


class AliasingError(EngineError):
    """An output buffer overlaps an input buffer."""


class PlanError(EngineError):
    """Memory plan construction or lookup failed."""


class CapacityError(EngineError):
    """A requested shape exceeds the planned maximum."""


class FormatError(EngineError):
    """A weight file is malformed or truncated."""


class ConsistencyError(EngineError):
    """Weight tensors disagree with the model configuration."""


class FullMaskError(EngineError):
    """An attention row has every key position masked out."""


class ParameterError(EngineError):
    """A decoding parameter is out of range."""


class InputError(EngineError):
    """An input token or input shape is invalid."""
