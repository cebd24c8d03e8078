from collections.abc import Sequence
from typing import TYPE_CHECKING, Protocol, TypeAlias, runtime_checkable

import numpy as np
import numpy.typing as npt

if TYPE_CHECKING:
    from .dataset import DatasetRecord

RealArray: TypeAlias = npt.NDArray[np.float64]
"""Double precision real array."""

ComplexArray: TypeAlias = npt.NDArray[np.complex128]
"""Double precision complex array."""

BoolArray: TypeAlias = npt.NDArray[np.bool_]
"""Boolean mask array."""

TagArray: TypeAlias = npt.NDArray[np.int8]
"""Small integer classification array."""

Shape: TypeAlias = tuple[int, ...]
"""Array shape."""


class ChannelRecipe(Protocol):
    """
    Protocol definition for functions that turn a dataset record into a network channel stack.
    """

    def __call__(self, record: "DatasetRecord") -> RealArray:
        """
        Arguments:
            record: The dataset record to convert.

        Returns:
            Real array of shape `(channels, ny, nx)`.

        Raises:
            MissingFieldError: If the record lacks a field that the recipe needs.
        """
        ...


@runtime_checkable
class Predictor(Protocol):
    """
    Protocol for anything that maps dataset records to predicted pressure fields.

    Trained networks, hybrid models and reference baselines (for example the zero predictor
    used in metric sanity checks) all implement it.

    The protocol is runtime-checkable, so it can be used in `isinstance()`, `issubclass()` calls.
    """

    def predict(self, records: Sequence["DatasetRecord"]) -> ComplexArray:
        """
        Returns the predicted complex field for every record, shape `(len(records), ny, nx)`.
        """
        ...

    def parameter_count(self) -> int:
        """Returns the number of trainable scalars behind the prediction (0 for baselines)."""
        ...
