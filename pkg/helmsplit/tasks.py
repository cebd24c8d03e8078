"""
Learning tasks.

Every task maps a dataset record to a real channel stack (the network input) and a complex
target field (the network output, as two real channels):

| task       | input channels                          | target  |
|------------|-----------------------------------------|---------|
| `smooth`   | `v_bg`, `Re s`, `x`, `y`                | `p_bg`  |
| `residual` | `Re p_bg`, `Im p_bg`, `δv`, `x`, `y`    | `δp`    |
| `sharp`    | `v`, `Re s`, `x`, `y`                   | `p`     |

`x` and `y` are the node coordinates scaled to `[0, 1]`.
"""

import enum
import hashlib
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .dataset import DatasetRecord, complex_planes
from .errors import ConfigError, ShapeError
from .fields import Grid2D
from .typing import ChannelRecipe, ComplexArray, RealArray

STD_FLOOR = 1e-12
"""Standard deviations below this are replaced by 1 (constant channels)."""


class TaskKind(enum.StrEnum):
    """The three learning tasks."""

    SMOOTH = "smooth"
    RESIDUAL = "residual"
    SHARP = "sharp"


def coordinate_channels(grid: Grid2D) -> RealArray:
    """
    Node coordinates scaled to `[0, 1]`, shape `(2, ny, nx)` with `x` first.

    The channels only depend on the grid shape.
    """
    xx, yy = np.meshgrid(np.linspace(0.0, 1.0, grid.nx), np.linspace(0.0, 1.0, grid.ny), indexing="xy")
    return np.stack((xx, yy))


def source_stack(velocity: RealArray, source: ComplexArray, grid: Grid2D) -> RealArray:
    """`(velocity, Re s, x, y)` channel stack shared by the smooth and sharp tasks."""
    return np.concatenate((velocity[None], source.real[None], coordinate_channels(grid)))


def smooth_inputs(record: DatasetRecord) -> RealArray:
    """Channel stack of the smooth task."""
    return source_stack(record.require("v_bg").values, record.require("s").values, record.grid)


def residual_inputs(record: DatasetRecord) -> RealArray:
    """Channel stack of the residual task."""
    return residual_stack(record.require("p_bg").values, record.require("delta_v").values, record.grid)


def residual_stack(p_bg: ComplexArray, delta_v: RealArray, grid: Grid2D) -> RealArray:
    """Residual-task channel stack from a (possibly predicted) background field."""
    return np.concatenate((complex_planes(p_bg), delta_v[None], coordinate_channels(grid)))


def sharp_inputs(record: DatasetRecord) -> RealArray:
    """Channel stack of the sharp task."""
    return source_stack(record.require("v").values, record.require("s").values, record.grid)


@dataclass(frozen=True, slots=True)
class TaskSpec:
    """Input recipe and target selector of a learning task."""

    kind: TaskKind
    """The task."""

    inputs: ChannelRecipe
    """Builds the input channel stack of a record."""

    target: Literal["p_bg", "delta_p", "p"]
    """The record field the task predicts."""

    in_channels: int
    """Number of input channels."""

    def input_stack(self, record: DatasetRecord) -> RealArray:
        """
        Raises:
            MissingFieldError: If the record lacks an input field.
        """
        return self.inputs(record)

    def target_field(self, record: DatasetRecord) -> ComplexArray:
        """
        Raises:
            MissingFieldError: If the record lacks the target field.
        """
        return record.require(self.target).values

    def target_stack(self, record: DatasetRecord) -> RealArray:
        """The target as a `(2, ny, nx)` real stack."""
        return complex_planes(self.target_field(record))

    def arrays(self, records: Sequence[DatasetRecord]) -> tuple[RealArray, RealArray]:
        """Stacked inputs `(n, C, ny, nx)` and targets `(n, 2, ny, nx)` of the records."""
        inputs = np.stack([self.input_stack(r) for r in records])
        targets = np.stack([self.target_stack(r) for r in records])
        return inputs, targets


TASKS: dict[TaskKind, TaskSpec] = {
    TaskKind.SMOOTH: TaskSpec(TaskKind.SMOOTH, smooth_inputs, "p_bg", 4),
    TaskKind.RESIDUAL: TaskSpec(TaskKind.RESIDUAL, residual_inputs, "delta_p", 5),
    TaskKind.SHARP: TaskSpec(TaskKind.SHARP, sharp_inputs, "p", 4),
}


def get_task(kind: TaskKind | str) -> TaskSpec:
    """
    Raises:
        ConfigError: If the task is unknown.
    """
    try:
        return TASKS[TaskKind(kind)]
    except ValueError as e:
        raise ConfigError(f"Unknown task: {kind}") from e


def indices_digest(indices: Sequence[int] | np.ndarray) -> str:
    """SHA-256 of the sorted sample indices, the provenance tag of normalization statistics."""
    return hashlib.sha256(np.sort(np.asarray(indices, dtype="<i8")).tobytes()).hexdigest()


def channel_moments(stack: RealArray) -> tuple[RealArray, RealArray]:
    """Per-channel mean and floored standard deviation of an `(n, C, ny, nx)` stack."""
    mean = stack.mean(axis=(0, 2, 3))
    std = stack.std(axis=(0, 2, 3))
    return mean, np.where(std < STD_FLOOR, 1.0, std)


@dataclass(frozen=True, slots=True)
class NormalizationStats:
    """Per-channel affine normalization of network inputs and outputs."""

    input_mean: RealArray
    input_std: RealArray
    output_mean: RealArray
    output_std: RealArray

    provenance: str
    """Digest of the training indices the statistics were computed from."""

    @classmethod
    def fit(
        cls, inputs: RealArray, targets: RealArray, indices: Sequence[int] | np.ndarray
    ) -> "NormalizationStats":
        """
        Computes the statistics of the given training arrays.

        Arguments:
            inputs: Training inputs `(n, C, ny, nx)`.
            targets: Training targets `(n, 2, ny, nx)`.
            indices: Dataset indices of the training samples.

        Raises:
            ShapeError: If the arrays are not 4-dimensional or empty.
        """
        if inputs.ndim != 4 or targets.ndim != 4 or len(inputs) == 0:
            raise ShapeError("Normalization needs non-empty (n, C, ny, nx) stacks.")

        input_mean, input_std = channel_moments(inputs)
        output_mean, output_std = channel_moments(targets)
        return cls(
            input_mean=input_mean,
            input_std=input_std,
            output_mean=output_mean,
            output_std=output_std,
            provenance=indices_digest(indices),
        )

    def check_provenance(self, train_indices: Sequence[int] | np.ndarray) -> None:
        """
        Raises:
            ConfigError: If the statistics were not computed from exactly `train_indices`.
        """
        if self.provenance != indices_digest(train_indices):
            raise ConfigError("Normalization statistics were not computed from the training split.")
