import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .errors import DegenerateFieldError, DomainError, ShapeError
from .typing import ComplexArray, RealArray

FieldKind = Literal["generic", "mask", "fraction"]
"""Value-range contract of a real field."""


@dataclass(frozen=True, slots=True)
class Grid2D:
    """
    Uniform node-centered rectangular grid.

    Node coordinates are `x_i = i * dx` and `y_j = j * dy` with `dx = lx / (nx - 1)` and
    `dy = ly / (ny - 1)`. Arrays on the grid are stored row-major with shape `(ny, nx)`,
    `y` is depth and row `0` is the surface.
    """

    nx: int
    """Number of nodes along x."""

    ny: int
    """Number of nodes along y."""

    lx: float
    """Physical extent along x in meters."""

    ly: float
    """Physical extent along y in meters."""

    def __post_init__(self) -> None:
        if self.nx < 2 or self.ny < 2:
            raise DomainError(f"Grid needs at least 2 nodes per axis, got {self.ny}x{self.nx}.")
        if not (self.lx > 0 and self.ly > 0):
            raise DomainError("Grid extents must be positive.")

    @property
    def dx(self) -> float:
        """Node spacing along x."""
        return self.lx / (self.nx - 1)

    @property
    def dy(self) -> float:
        """Node spacing along y."""
        return self.ly / (self.ny - 1)

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape `(ny, nx)`."""
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        """Number of nodes."""
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        """`dx * dy`."""
        return self.dx * self.dy

    @property
    def x(self) -> RealArray:
        """Node x-coordinates."""
        return np.arange(self.nx, dtype=np.float64) * self.dx

    @property
    def y(self) -> RealArray:
        """Node y-coordinates."""
        return np.arange(self.ny, dtype=np.float64) * self.dy

    def meshgrid(self) -> tuple[RealArray, RealArray]:
        """Returns the `(X, Y)` coordinate arrays, both of shape `(ny, nx)`."""
        xx, yy = np.meshgrid(self.x, self.y, indexing="xy")
        return xx, yy

    def check_same(self, other: "Grid2D") -> None:
        """
        Raises:
            ShapeError: If `other` is not the same grid.
        """
        if self != other:
            raise ShapeError(f"Grid mismatch: {self} != {other}.")


@dataclass(frozen=True, slots=True)
class ScalarField2D:
    """
    Real field sampled on a `Grid2D`.

    Velocities are in m/s, masks and salt fractions are dimensionless. The `kind` attribute
    selects the value-range contract that is validated on construction.
    """

    grid: Grid2D
    """The grid the field lives on."""

    values: RealArray
    """Real values of shape `(ny, nx)`."""

    kind: FieldKind = field(default="generic", kw_only=True)
    """Value-range contract: unrestricted, binary mask or fraction in `[0, 1]`."""

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ShapeError(f"Field shape {values.shape} does not match grid shape {self.grid.shape}.")
        if not np.all(np.isfinite(values)):
            raise DomainError("Field values must be finite.")
        if self.kind == "mask" and not np.all((values == 0.0) | (values == 1.0)):
            raise DomainError("Mask values must be 0 or 1.")
        if self.kind == "fraction" and (values.min() < 0.0 or values.max() > 1.0):
            raise DomainError("Fraction values must lie in [0, 1].")

        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: Grid2D, value: float, *, kind: FieldKind = "generic") -> "ScalarField2D":
        """Creates a constant field."""
        return cls(grid, np.full(grid.shape, value, dtype=np.float64), kind=kind)


@dataclass(frozen=True, slots=True)
class ComplexField2D:
    """Complex field (pressure or source) sampled on a `Grid2D`."""

    grid: Grid2D
    """The grid the field lives on."""

    values: ComplexArray
    """Complex values of shape `(ny, nx)`."""

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.complex128)
        if values.shape != self.grid.shape:
            raise ShapeError(f"Field shape {values.shape} does not match grid shape {self.grid.shape}.")
        if not np.all(np.isfinite(values)):
            raise DomainError("Field values must be finite.")

        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ComplexField2D":
        """Creates an all-zero field."""
        return cls(grid, np.zeros(grid.shape, dtype=np.complex128))

    def __add__(self, other: "ComplexField2D") -> "ComplexField2D":
        self.grid.check_same(other.grid)
        return ComplexField2D(self.grid, self.values + other.values)

    def __sub__(self, other: "ComplexField2D") -> "ComplexField2D":
        self.grid.check_same(other.grid)
        return ComplexField2D(self.grid, self.values - other.values)

    def scale(self, factor: complex) -> "ComplexField2D":
        """Returns `factor * self`."""
        return ComplexField2D(self.grid, factor * self.values)


@dataclass(frozen=True, slots=True)
class Frequency:
    """Time-harmonic frequency."""

    f: float
    """Frequency in Hz."""

    def __post_init__(self) -> None:
        if not self.f > 0:
            raise DomainError(f"Frequency must be positive, got {self.f}.")

    @property
    def omega(self) -> float:
        """Angular frequency in rad/s."""
        return 2.0 * math.pi * self.f


def field_rel_l2(
    pred: ComplexField2D | ScalarField2D,
    target: ComplexField2D | ScalarField2D,
) -> float:
    """
    Relative Euclidean error `‖pred - target‖₂ / ‖target‖₂`.

    Real and imaginary components are both included.

    Raises:
        ShapeError: If the fields live on different grids.
        DegenerateFieldError: If the target norm is zero.
    """
    pred.grid.check_same(target.grid)
    denominator = float(np.linalg.norm(target.values))
    if denominator == 0.0:
        raise DegenerateFieldError("Relative error is undefined for a zero target.")

    return float(np.linalg.norm(pred.values - target.values)) / denominator


def dft2_forward(field: ComplexField2D | ScalarField2D) -> ComplexArray:
    """
    Unitary 2D discrete Fourier transform of the field values.

    The coefficient array has the field's shape, with the zero mode at index `(0, 0)`.
    """
    return np.fft.fft2(field.values, norm="ortho")


def dft2_inverse(coeffs: ComplexArray, grid: Grid2D) -> ComplexField2D:
    """
    Inverse of `dft2_forward()`.

    Raises:
        ShapeError: If the coefficient array does not match the grid.
    """
    if coeffs.shape != grid.shape:
        raise ShapeError(f"Coefficient shape {coeffs.shape} does not match grid shape {grid.shape}.")

    return ComplexField2D(grid, np.fft.ifft2(coeffs, norm="ortho"))


def nearest_indices(src_spacing: float, n_src: int, coords: RealArray) -> RealArray:
    """
    Returns the index of the nearest source node for every coordinate, ties broken toward
    the lower index.
    """
    # Relative slack keeps exact midpoints on the lower side despite rounding.
    t = coords / src_spacing
    idx = np.ceil(t - 0.5 - 1e-9 * np.maximum(1.0, np.abs(t)))
    return np.clip(idx, 0, n_src - 1)


def resample_nearest(src: ScalarField2D, dst_grid: Grid2D) -> ScalarField2D:
    """
    Samples `src` onto `dst_grid` by nearest-neighbor interpolation in physical coordinates.

    Destination coordinates outside the source extent take the value of the nearest edge node.
    The result keeps the value-range contract (`kind`) of the source.
    """
    if dst_grid == src.grid:
        return src

    iy = nearest_indices(src.grid.dy, src.grid.ny, dst_grid.y).astype(np.int64)
    ix = nearest_indices(src.grid.dx, src.grid.nx, dst_grid.x).astype(np.int64)
    return ScalarField2D(dst_grid, src.values[np.ix_(iy, ix)], kind=src.kind)
