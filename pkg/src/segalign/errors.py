"""Shared exception types."""


class SegAlignError(Exception):
    """Base class for all package errors."""


class InvalidPromptError(SegAlignError):
    """Prompt is empty or unusable after normalization."""


class UnknownTokenError(SegAlignError):
    """A word is not in the closed vocabulary."""

    def __init__(self, word: str):
        super().__init__(f"unknown token: {word!r}")
        self.word = word


class SegmentOverflowError(SegAlignError):
    """A segment has more content tokens than the per-segment cap allows."""


class ConditioningOverflowError(SegAlignError):
    """Merged conditioning sequence does not fit in N_cond positions."""

    def __init__(self, required: int, available: int):
        super().__init__(
            f"conditioning overflow: need {required} positions, have {available}"
        )
        self.required = required
        self.available = available


class InvalidImageError(SegAlignError):
    """Image tensor has the wrong shape or dtype."""


class InvalidSpecError(SegAlignError):
    """Scene specification violates its invariants."""


class DegenerateCorpusError(SegAlignError):
    """Prompt corpus mean embedding is too close to zero to normalize."""


class MissingDirectionError(SegAlignError):
    """A common direction is required but was not provided."""


class InvalidRecordError(SegAlignError):
    """A dataset record is missing a required field."""


class InvalidTimestepError(SegAlignError):
    """Timestep outside the schedule range."""


class DivergenceError(SegAlignError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class TrainingFailureError(SegAlignError):
    """Training finished without improving over initialization."""


class IncompatibleCheckpointError(SegAlignError):
    """Checkpoint header or manifest does not match expectations."""


class CorruptCheckpointError(SegAlignError):
    """Checkpoint file is truncated or malformed."""
