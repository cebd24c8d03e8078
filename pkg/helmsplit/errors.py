class HelmsplitError(Exception):
    """Base class of every error raised by the package."""

    ...


class ShapeError(HelmsplitError, ValueError):
    """Grid, array or channel-stack shapes are incompatible."""

    ...


class DegenerateFieldError(HelmsplitError, ValueError):
    """
    A field is degenerate for the requested operation.

    Examples: a zero-norm reference in relative errors, a constant field in quantile thresholding.
    """

    ...


class DomainError(HelmsplitError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""

    ...


class ConfigError(HelmsplitError, ValueError):
    """Invalid or incompatible configuration."""

    ...


class ResourceError(HelmsplitError, RuntimeError):
    """The problem is too large for a dense (oracle) computation."""

    ...


class FactorizationError(HelmsplitError, RuntimeError):
    """Dense symmetric factorization failed."""

    ...


class SolverError(HelmsplitError, RuntimeError):
    """Sparse linear solve failed."""

    def __init__(self, message: str, *, diagnostic: float | None = None) -> None:
        super().__init__(message if diagnostic is None else f"{message} (diagnostic={diagnostic:.3e})")
        self.diagnostic = diagnostic
        """Condition-type diagnostic of the failed factorization, if one could be computed."""


class TrainingDivergedError(HelmsplitError, RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, *, lr: float, batch_index: int, epoch: int) -> None:
        super().__init__(f"Non-finite loss in epoch {epoch}, batch {batch_index} (lr={lr:.3e}).")
        self.lr = lr
        self.batch_index = batch_index
        self.epoch = epoch


class DatasetFormatError(HelmsplitError, ValueError):
    """The dataset container is malformed."""

    ...


class CheckpointFormatError(HelmsplitError, ValueError):
    """The checkpoint file is malformed or does not match its configuration."""

    ...


class MissingFieldError(HelmsplitError, KeyError):
    """A record lacks a field that is required by a task."""

    def __init__(self, field: str) -> None:
        super().__init__(f"Required dataset field is missing: {field}")
        self.field = field


class ResolutionWarning(UserWarning):
    """The grid resolves the shortest wavelength with fewer points than recommended."""

    ...
