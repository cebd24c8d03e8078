"""
Finite-difference frequency-domain Helmholtz solver.

Discretizes `(Δ + ω²/v²) p = -s` with the second-order 5-point stencil on a `Grid2D`:

- row `y = 0` is the free surface with `p = 0` (Dirichlet, it also wins at the two top corners),
- the other three edges carry the absorbing condition `∂_ν p - (iω/v) p = 0`, eliminated
  through a ghost node with a central difference.

Rows on absorbing edges are scaled by ½ per eliminated ghost direction, which makes the
assembled matrix exactly complex symmetric (`A = Aᵀ`). The right-hand side is scaled with the
same row weights, see `HelmholtzSystem.rhs()`.
"""

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import Field, PositiveFloat
from scipy import sparse
from scipy.sparse import linalg as sla

from .errors import DegenerateFieldError, DomainError, ResolutionWarning, ShapeError, SolverError
from .fields import ComplexField2D, Grid2D, ScalarField2D
from .typing import BoolArray, ComplexArray, RealArray, TagArray
from .utils import FrozenModel, timed

logger = logging.getLogger(__name__)

MIN_SOLVER_NODES = 4
"""Minimum number of nodes per axis of a solver grid."""


class BoundaryTag(enum.IntEnum):
    """Per-node boundary classification."""

    INTERIOR = 0
    ABC_LEFT = 1
    ABC_RIGHT = 2
    ABC_BOTTOM = 3
    FREE_TOP = 4
    CORNER = 5
    """Bottom corner, absorbing in both directions. Top corners are `FREE_TOP`."""


class SolverSettings(FrozenModel):
    """Linear solver settings."""

    method: Literal["direct", "iterative"] = "direct"
    """Sparse LU factorization or preconditioned restarted GMRES."""

    ppw_min: PositiveFloat = 10.0
    """Minimum points per wavelength at the slowest velocity."""

    strict_resolution: bool = False
    """Raise instead of warn on under-resolved grids."""

    accept_residual: PositiveFloat = 1e-6
    """Largest relative residual accepted from a solve."""

    rtol: PositiveFloat = 1e-9
    """Relative tolerance of the iterative solver."""

    restart: int = Field(default=60, ge=1)
    """GMRES restart length."""

    maxiter: int = Field(default=200, ge=1)
    """Maximum number of GMRES restart cycles."""

    shift: PositiveFloat = 0.5
    """Imaginary shift `β` of the preconditioner's `ω²(1 - iβ)/v²` term."""

    min_pivot_ratio: PositiveFloat = 1e-13
    """Smallest accepted `min |U_ii| / max |U_ii|` of the LU factor."""


class SourceSpec(FrozenModel):
    """Gaussian point source placement."""

    x: float | None = None
    """Horizontal position in meters, the middle of the free surface if not set."""

    y: float = Field(default=80.0, ge=0.0)
    """Depth in meters."""

    width: PositiveFloat = 20.0
    """Gaussian standard deviation in meters."""

    amplitude: float = 1.0
    """Discrete integral of the source."""

    def build(self, grid: Grid2D) -> ComplexField2D:
        """Creates the source on `grid`."""
        center = (grid.lx / 2 if self.x is None else self.x, self.y)
        return gaussian_point_source(grid, center, self.width, self.amplitude)


@dataclass(frozen=True, slots=True)
class SolveReport:
    """Diagnostics of a linear solve."""

    residual_norm: float
    """Relative residual `‖A·p - b‖ / ‖b‖` (0 for a zero right-hand side)."""

    iterations: int
    """Krylov iterations, 0 for the direct solver."""

    factor_time: float
    """Factorization (or preconditioner setup) wall time in seconds."""

    solve_time: float
    """Solve wall time in seconds."""


@dataclass(frozen=True, slots=True)
class HelmholtzSystem:
    """Assembled sparse system for one velocity model and frequency."""

    grid: Grid2D
    """The solver grid."""

    omega: float
    """Angular frequency in rad/s."""

    velocity: ScalarField2D
    """The velocity model the system was assembled for."""

    matrix: sparse.csr_matrix
    """Complex symmetric system matrix, `N x N` with `N = nx * ny`."""

    boundary_map: TagArray = field(repr=False)
    """Per-node `BoundaryTag` values, shape `(ny, nx)`."""

    row_weights: RealArray = field(repr=False)
    """Row scaling of every node (1 inside, ½ on absorbing edges, ¼ at absorbing corners)."""

    @property
    def dirichlet(self) -> BoolArray:
        """Boolean mask of the Dirichlet nodes, shape `(ny, nx)`."""
        return self.boundary_map == BoundaryTag.FREE_TOP

    def rhs(self, source: ComplexArray) -> ComplexArray:
        """
        Returns the assembled right-hand side `b = -W·s` (flattened) for the grid source `s`.

        Dirichlet rows carry `b = 0`.

        Raises:
            ShapeError: If the source does not match the grid.
        """
        if source.shape != self.grid.shape:
            raise ShapeError(f"Source shape {source.shape} does not match grid shape {self.grid.shape}.")

        b = -self.row_weights * source
        b[self.dirichlet] = 0.0
        return np.asarray(b, dtype=np.complex128).ravel()

    def residual(self, p: ComplexArray, b: ComplexArray) -> float:
        """Relative residual `‖A·p - b‖ / ‖b‖`, or the absolute one for `b = 0`."""
        r = float(np.linalg.norm(self.matrix @ p.ravel() - b))
        nb = float(np.linalg.norm(b))
        return r / nb if nb > 0 else r


def boundary_tags(grid: Grid2D, boundary: Literal["mixed", "dirichlet"] = "mixed") -> TagArray:
    """
    Classifies the grid nodes.

    In `"dirichlet"` mode (a test hook) all four edges are tagged `FREE_TOP`.
    """
    ny, nx = grid.shape
    jj, ii = np.indices((ny, nx))
    tags = np.full((ny, nx), BoundaryTag.INTERIOR, dtype=np.int8)
    if boundary == "dirichlet":
        tags[(jj == 0) | (jj == ny - 1) | (ii == 0) | (ii == nx - 1)] = BoundaryTag.FREE_TOP
        return tags

    tags[ii == 0] = BoundaryTag.ABC_LEFT
    tags[ii == nx - 1] = BoundaryTag.ABC_RIGHT
    tags[jj == ny - 1] = BoundaryTag.ABC_BOTTOM
    tags[(jj == ny - 1) & ((ii == 0) | (ii == nx - 1))] = BoundaryTag.CORNER
    tags[jj == 0] = BoundaryTag.FREE_TOP
    return tags


def points_per_wavelength(velocity: ScalarField2D, omega: float) -> float:
    """Points per shortest wavelength, `inf` for `omega = 0`."""
    if omega == 0:
        return math.inf

    f = omega / (2.0 * math.pi)
    return float(np.min(velocity.values)) / (f * max(velocity.grid.dx, velocity.grid.dy))


def assemble(
    velocity: ScalarField2D,
    omega: float,
    grid: Grid2D | None = None,
    *,
    boundary: Literal["mixed", "dirichlet"] = "mixed",
    settings: SolverSettings | None = None,
) -> HelmholtzSystem:
    """
    Assembles the Helmholtz system `A·p = -s` for the given velocity model.

    Arguments:
        velocity: Wavespeed in m/s on the solver grid.
        omega: Angular frequency in rad/s.
        grid: Optional expected grid, checked against the velocity's grid.
        boundary: `"mixed"` (free surface on top, absorbing elsewhere) or `"dirichlet"`
            on every edge (test hook).
        settings: Solver settings with the resolution requirements.

    Raises:
        DomainError: If the velocity is not positive, `omega` is negative, the grid is too
            small, or the grid is under-resolved with `strict_resolution`.
        ShapeError: If `grid` is given and differs from the velocity's grid.
    """
    settings = SolverSettings() if settings is None else settings
    if grid is not None:
        grid.check_same(velocity.grid)

    grid = velocity.grid
    if min(grid.shape) < MIN_SOLVER_NODES:
        raise DomainError(f"Solver grids need at least {MIN_SOLVER_NODES} nodes per axis.")
    if omega < 0:
        raise DomainError("omega must be non-negative.")

    v = velocity.values
    if np.any(v <= 0):
        raise DomainError("Velocity must be positive.")

    ppw = points_per_wavelength(velocity, omega)
    if ppw < settings.ppw_min:
        message = f"Grid resolves the shortest wavelength with {ppw:.2f} < {settings.ppw_min} points."
        if settings.strict_resolution:
            raise DomainError(message)
        logger.warning(message)
        warnings.warn(message, ResolutionWarning, stacklevel=2)

    ny, nx = grid.shape
    dx2, dy2 = grid.dx**2, grid.dy**2
    tags = boundary_tags(grid, boundary)
    dirichlet = tags == BoundaryTag.FREE_TOP
    jj, ii = np.indices((ny, nx))
    abc_x = ~dirichlet & ((ii == 0) | (ii == nx - 1)) if boundary == "mixed" else np.zeros_like(dirichlet)
    abc_y = ~dirichlet & (jj == ny - 1) if boundary == "mixed" else np.zeros_like(dirichlet)
    weights = np.where(abc_x, 0.5, 1.0) * np.where(abc_y, 0.5, 1.0)

    diag = (omega**2 / v**2 - 2.0 / dx2 - 2.0 / dy2).astype(np.complex128)
    diag += abc_x * (2j * omega / (v * grid.dx))
    diag += abc_y * (2j * omega / (v * grid.dy))
    diag = np.where(dirichlet, 1.0 + 0j, weights * diag)

    index = np.arange(grid.size).reshape(ny, nx)
    rows: list[np.ndarray] = [index.ravel()]
    cols: list[np.ndarray] = [index.ravel()]
    vals: list[np.ndarray] = [diag.ravel()]
    for dj, di, base in ((0, 1, 1.0 / dx2), (0, -1, 1.0 / dx2), (1, 0, 1.0 / dy2), (-1, 0, 1.0 / dy2)):
        nj, ni = jj + dj, ii + di
        valid = (nj >= 0) & (nj < ny) & (ni >= 0) & (ni < nx) & ~dirichlet
        valid[valid] &= ~dirichlet[nj[valid], ni[valid]]
        # Inward neighbor of an absorbing edge node absorbs the eliminated ghost node.
        if di != 0:
            ghost = abc_x & (((ii == 0) & (di == 1)) | ((ii == nx - 1) & (di == -1)))
        else:
            ghost = abc_y & (dj == -1)
        coeff = (weights * np.where(ghost, 2.0, 1.0)) * base
        rows.append(index[valid])
        cols.append(index[nj[valid], ni[valid]])
        vals.append(coeff[valid].astype(np.complex128))

    matrix = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    ).tocsr()

    asymmetry = abs(matrix - matrix.T)
    if asymmetry.nnz > 0 and asymmetry.max() > 0:
        raise SolverError("Assembled Helmholtz matrix is not symmetric.", diagnostic=float(asymmetry.max()))

    return HelmholtzSystem(
        grid=grid,
        omega=omega,
        velocity=velocity,
        matrix=matrix,
        boundary_map=tags,
        row_weights=weights,
    )


@dataclass(frozen=True, slots=True)
class Factorization:
    """
    Reusable solver handle for one assembled system.

    The handle is immutable after construction, so one factorization can serve many
    right-hand sides, also from several threads.
    """

    system: HelmholtzSystem
    """The factorized system."""

    settings: SolverSettings
    """The settings the handle was created with."""

    lu: sla.SuperLU | None
    """Complete LU factor (direct method)."""

    preconditioner: sla.SuperLU | None
    """Incomplete LU of the shifted operator (iterative method)."""

    factor_time: float
    """Setup wall time in seconds."""

    def solve(self, rhs: ComplexArray) -> tuple[ComplexArray, SolveReport]:
        """
        Solves `A·x = rhs` for one (`(N,)`) or many (`(N, k)`) right-hand sides.

        Raises:
            SolverError: If the relative residual of a column exceeds `settings.accept_residual`.
        """
        iterations = 0
        with timed() as watch:
            if self.lu is not None:
                solution = self.lu.solve(rhs)
            else:
                columns = rhs.reshape(rhs.shape[0], -1)
                solution = np.empty_like(columns)
                for k in range(columns.shape[1]):
                    solution[:, k], its = self._gmres(columns[:, k])
                    iterations += its
                solution = solution.reshape(rhs.shape)

        b = rhs.reshape(rhs.shape[0], -1)
        x = solution.reshape(rhs.shape[0], -1)
        residual = max(self.system.residual(x[:, k], b[:, k]) for k in range(b.shape[1]))
        if residual > self.settings.accept_residual:
            raise SolverError("Linear solve did not reach the accepted residual.", diagnostic=residual)

        report = SolveReport(
            residual_norm=residual,
            iterations=iterations,
            factor_time=self.factor_time,
            solve_time=watch.seconds,
        )
        logger.debug("Solved %s system: %s", self.system.grid.shape, report)
        return solution, report

    def _gmres(self, b: ComplexArray) -> tuple[ComplexArray, int]:
        if not np.any(b):
            return np.zeros_like(b), 0

        if self.preconditioner is None:
            raise SolverError("The solver handle has neither an LU factor nor a preconditioner.")

        counter = [0]

        def count(_: object) -> None:
            counter[0] += 1

        operator = sla.LinearOperator(
            self.system.matrix.shape, matvec=self.preconditioner.solve, dtype=np.complex128
        )
        x, info = sla.gmres(
            self.system.matrix,
            b,
            rtol=self.settings.rtol,
            restart=self.settings.restart,
            maxiter=self.settings.maxiter,
            M=operator,
            callback=count,
            callback_type="pr_norm",
        )
        if info != 0:
            raise SolverError(f"GMRES did not converge (info={info}).")

        return np.asarray(x, dtype=np.complex128), counter[0]


def factorize(system: HelmholtzSystem, settings: SolverSettings | None = None) -> Factorization:
    """
    Prepares `system` for solving: sparse LU (direct) or a shifted-operator ILU preconditioner
    (iterative).

    Raises:
        SolverError: If the matrix is singular or its LU factor is numerically singular.
    """
    settings = SolverSettings() if settings is None else settings
    matrix = system.matrix.tocsc()
    with timed() as watch:
        if settings.method == "direct":
            try:
                lu = sla.splu(matrix)
            except RuntimeError as e:
                raise SolverError("Helmholtz matrix is singular.") from e

            pivots = np.abs(lu.U.diagonal())
            ratio = float(pivots.min() / pivots.max())
            if ratio < settings.min_pivot_ratio:
                raise SolverError("Helmholtz matrix is numerically singular.", diagnostic=ratio)

            preconditioner = None
        else:
            lu = None
            shifted = assemble_shifted(system, settings.shift).tocsc()
            preconditioner = sla.spilu(shifted, drop_tol=1e-5, fill_factor=20)

    logger.debug("Factorized %s system in %.3fs.", system.grid.shape, watch.seconds)
    return Factorization(
        system=system, settings=settings, lu=lu, preconditioner=preconditioner, factor_time=watch.seconds
    )


def assemble_shifted(system: HelmholtzSystem, beta: float) -> sparse.csr_matrix:
    """
    Complex-shifted operator: the `ω²/v²` term of every non-Dirichlet row is multiplied by
    `1 - iβ`.
    """
    v = system.velocity.values
    shift = np.where(system.dirichlet, 0.0, system.row_weights * (-1j * beta) * system.omega**2 / v**2)
    return (system.matrix + sparse.diags(shift.ravel())).tocsr()


def to_field(solution: ComplexArray, grid: Grid2D) -> ComplexField2D:
    """Reshapes a flat solution vector into a field."""
    return ComplexField2D(grid, solution.reshape(grid.shape))


def solve_full(
    velocity: ScalarField2D,
    source: ComplexField2D,
    omega: float,
    *,
    settings: SolverSettings | None = None,
) -> tuple[ComplexField2D, SolveReport]:
    """
    Solves the Helmholtz problem `F: (s, v) ↦ p`.

    Raises:
        ShapeError: If source and velocity live on different grids.
        DomainError: See `assemble()`.
        SolverError: See `factorize()` and `Factorization.solve()`.
    """
    velocity.grid.check_same(source.grid)
    system = assemble(velocity, omega, settings=settings)
    solution, report = factorize(system, settings).solve(system.rhs(source.values))
    return to_field(solution, system.grid), report


def solve_background(
    v_bg: ScalarField2D,
    source: ComplexField2D,
    omega: float,
    *,
    settings: SolverSettings | None = None,
) -> tuple[ComplexField2D, SolveReport]:
    """Solves the background problem `F_bg: (s, v_bg) ↦ p_bg`, the same code path as `solve_full()`."""
    return solve_full(v_bg, source, omega, settings=settings)


def contrast_rhs(system: HelmholtzSystem, v_bg: ScalarField2D, p_bg: ComplexField2D) -> ComplexArray:
    """
    Right-hand side `-ω²·W·δm·p_bg` of the residual problem, `δm = v⁻² - v_bg⁻²` with `v`
    the velocity of `system`. Dirichlet rows carry 0.
    """
    delta_m = system.velocity.values**-2 - v_bg.values**-2
    b = -(system.omega**2) * system.row_weights * delta_m * p_bg.values
    b[system.dirichlet] = 0.0
    return np.asarray(b, dtype=np.complex128).ravel()


def solve_residual(
    v_bg: ScalarField2D,
    velocity_full: ScalarField2D,
    p_bg: ComplexField2D,
    omega: float,
    *,
    settings: SolverSettings | None = None,
) -> tuple[ComplexField2D, SolveReport]:
    """
    Solves for the scattered field `δp` with `p = p_bg + δp`.

    The contrast term `ω²·δm·δp` is moved to the left-hand side, so the system is the full
    Helmholtz operator (absorbing edges with the full velocity, free surface) applied to `δp`
    with the contrast source `-ω²·δm·p_bg`.

    Raises:
        ShapeError: If the inputs live on different grids.
        DomainError: See `assemble()`.
        SolverError: See `factorize()` and `Factorization.solve()`.
    """
    v_bg.grid.check_same(velocity_full.grid)
    v_bg.grid.check_same(p_bg.grid)
    system = assemble(velocity_full, omega, settings=settings)
    solution, report = factorize(system, settings).solve(contrast_rhs(system, v_bg, p_bg))
    return to_field(solution, system.grid), report


def pde_residual(
    p: ComplexField2D,
    velocity: ScalarField2D,
    source: ComplexField2D,
    omega: float,
) -> float:
    """
    Relative residual of `p` in the discrete Helmholtz equation, `‖A·p - b‖ / ‖b‖` with
    `b = -W·s` (see `HelmholtzSystem.rhs()`).

    Raises:
        DegenerateFieldError: If the assembled source vanishes.
        ShapeError: If the inputs live on different grids.
    """
    p.grid.check_same(velocity.grid)
    source.grid.check_same(velocity.grid)
    system = assemble(velocity, omega)
    b = system.rhs(source.values)
    if not np.any(b):
        raise DegenerateFieldError("PDE residual is undefined for a zero source.")

    return system.residual(p.values, b)


def gaussian_point_source(
    grid: Grid2D, center: tuple[float, float], width: float, amplitude: float = 1.0
) -> ComplexField2D:
    """
    Real Gaussian source `amplitude · exp(-‖x - center‖² / (2·width²))`, normalized so that
    its discrete integral `Σ s·dx·dy` equals `amplitude`.

    Arguments:
        grid: The solver grid.
        center: `(x, y)` in meters.
        width: Standard deviation in meters.
        amplitude: Discrete integral of the source.

    Raises:
        DomainError: If the center is outside the domain or the width is not positive.
    """
    cx, cy = center
    if not (0 <= cx <= grid.lx and 0 <= cy <= grid.ly):
        raise DomainError(f"Source center {center} is outside the domain.")
    if width <= 0:
        raise DomainError("Source width must be positive.")

    xx, yy = grid.meshgrid()
    bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width**2))
    return ComplexField2D(grid, amplitude * bump / (bump.sum() * grid.cell_area))


def dump_coo(system: HelmholtzSystem, path: Path) -> None:
    """
    Writes the matrix in coordinate text format: a `nx ny omega` header line, then one
    `row col re im` line per stored entry, 17 significant digits.
    """
    coo = system.matrix.tocoo()
    with path.open("w", encoding="utf-8") as f:
        f.write(f"{system.grid.nx} {system.grid.ny} {system.omega:.17g}\n")
        for r, c, value in zip(coo.row, coo.col, coo.data, strict=True):
            f.write(f"{r} {c} {value.real:.17g} {value.imag:.17g}\n")
