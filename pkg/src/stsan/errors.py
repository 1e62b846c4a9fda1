"""Exception types shared across the package.

Each maps to one failure class named in the module contracts, so callers
(and the CLI exit-code table) can dispatch on type instead of parsing
messages.
"""


class StsanError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(StsanError, ValueError):
    """Tensor shapes incompatible for the requested operation."""


class ContractError(StsanError, ValueError):
    """A call violated an operation's contract (bad argument, malformed input)."""


class ConfigError(StsanError, ValueError):
    """Invalid or inconsistent configuration."""


class DegenerateDataError(StsanError, ValueError):
    """Data has no usable variation (e.g. constant values for min-max scaling)."""


class InsufficientHistoryError(StsanError, ValueError):
    """Target interval has too little history to build a sample window."""


class EmptyEvaluationError(StsanError, ValueError):
    """No samples survived filtering; metrics are undefined."""


class IngestError(StsanError, ValueError):
    """Trip ingestion failed (too many malformed/out-of-range records)."""


class CheckpointError(StsanError, ValueError):
    """Checkpoint file unreadable, wrong version, or incompatible with config."""


class TrainingDivergedError(StsanError, RuntimeError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
