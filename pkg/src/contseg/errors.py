"""Exception and warning types shared across the toolkit.

Each class maps to a distinct CLI exit code (see cli.EXIT_CODES).
"""


class ContsegError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ContsegError):
    """Malformed or inconsistent experiment configuration."""


class DataLayoutError(ContsegError):
    """On-disk dataset does not match the expected images/labels layout."""


class InfeasibleSplitError(ContsegError):
    """The class-exclusivity constraint cannot be satisfied by the dataset."""

    def __init__(self, message, class_ids=()):
        super().__init__(message)
        self.class_ids = tuple(sorted(class_ids))


class LayoutMismatchError(ContsegError):
    """Parameter collections that must be index-aligned are not."""


class ShapeMismatchError(ContsegError):
    """Tensor spatial shapes incompatible with the requested operation."""


class TrainingDivergedError(ContsegError):
    """Non-finite loss encountered during training."""

    def __init__(self, message, task_id=None, epoch=None, step=None):
        super().__init__(message)
        self.task_id = task_id
        self.epoch = epoch
        self.step = step


class UndefinedMetricError(ContsegError):
    """Metric has no defined value (e.g. every class degenerate)."""


class ReportError(ContsegError):
    """Results cannot be merged or rendered into a report."""


class EmptyLossWarning(UserWarning):
    """A loss term had no contributing pixels and was defined as 0."""


class EmptyBufferWarning(UserWarning):
    """Batch composition requested replay from an empty buffer."""
