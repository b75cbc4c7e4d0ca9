"""Exception hierarchy shared across the toolkit."""


class SegRobustError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SegRobustError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(SegRobustError, ValueError):
    """A documented precondition was violated."""


class ConfigError(SegRobustError, ValueError):
    """A configuration value is invalid."""


class FormatError(SegRobustError):
    """A file could not be decoded (bad magic, version, truncation, checksum)."""


class IngestionError(FormatError):
    """A dataset directory failed validation."""


class TrainingError(SegRobustError, RuntimeError):
    """Training diverged or otherwise could not continue."""


class StageError(SegRobustError, RuntimeError):
    """A protocol stage failed; carries the stage name and context."""

    def __init__(self, stage, context, cause):
        self.stage = stage
        self.context = context
        self.cause = cause
        super().__init__(f"stage {stage!r} failed ({context}): {cause}")
