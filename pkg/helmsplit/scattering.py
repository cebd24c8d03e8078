"""
Green's functions and the Lippmann–Schwinger form of the scattering problem.

With `A_bg` the background system and `G(·, y) = -A_bg⁻¹ e_y / (dx·dy)` its Green's
columns, the discrete total field satisfies

    p(x) = p_s(x) + ω² Σ_y G(x, y)·δm(y)·p(y)·dx·dy

whenever the velocity contrast vanishes on the absorbing edges. These utilities are
verification machinery: they need one background solve per contrast node and are meant for
small grids.
"""

import numpy as np

from .errors import DomainError, ResourceError, ShapeError
from .fields import ComplexField2D, ScalarField2D
from .helmholtz import BoundaryTag, Factorization, SolverSettings, assemble, factorize, to_field
from .typing import BoolArray, ComplexArray

MAX_LS_NODES = 32 * 32
"""Largest grid accepted by `lippmann_schwinger_residual()`."""


def background_factorization(
    v_bg: ScalarField2D, omega: float, *, settings: SolverSettings | None = None
) -> Factorization:
    """Assembles and factorizes the background system."""
    return factorize(assemble(v_bg, omega, settings=settings), settings)


def greens_columns(factorization: Factorization, nodes: np.ndarray) -> ComplexArray:
    """
    Green's columns for the given flat node indices, shape `(N, len(nodes))`.

    Column `k` solves `A·g = -e_{nodes[k]} / (dx·dy)`.

    Raises:
        DomainError: If a node is on the free surface.
    """
    system = factorization.system
    if np.any(system.dirichlet.ravel()[nodes]):
        raise DomainError("Green's columns are undefined for free-surface nodes.")

    rhs = np.zeros((system.grid.size, len(nodes)), dtype=np.complex128)
    rhs[nodes, np.arange(len(nodes))] = -1.0 / system.grid.cell_area
    columns, _ = factorization.solve(rhs)
    return columns.reshape(system.grid.size, len(nodes))


def greens_column(
    v_bg: ScalarField2D,
    omega: float,
    source_node_index: int,
    *,
    factorization: Factorization | None = None,
) -> ComplexField2D:
    """
    Green's function `G(·, y, ω)` of the background operator for the interior node `y`.

    Arguments:
        v_bg: Background velocity.
        omega: Angular frequency.
        source_node_index: Flat (row-major) index of `y`.
        factorization: Optional prepared background factorization to reuse.

    Raises:
        DomainError: If the node is not an interior node.
    """
    factorization = background_factorization(v_bg, omega) if factorization is None else factorization
    tags = factorization.system.boundary_map.ravel()
    if not 0 <= source_node_index < tags.size or tags[source_node_index] != BoundaryTag.INTERIOR:
        raise DomainError(f"Node {source_node_index} is not an interior node.")

    column = greens_columns(factorization, np.array([source_node_index]))
    return to_field(column[:, 0], v_bg.grid)


def contrast_weights(factorization: Factorization, delta_m: ScalarField2D) -> ComplexArray:
    """Flat `W·δm` with the free-surface nodes removed."""
    system = factorization.system
    weighted = system.row_weights * delta_m.values
    weighted[system.dirichlet] = 0.0
    return np.asarray(weighted, dtype=np.complex128).ravel()


def scatter(factorization: Factorization, delta_m: ScalarField2D, p: ComplexField2D) -> ComplexArray:
    """
    Returns `ω² Σ_y G(·, y)·δm(y)·p(y)·dx·dy` (flattened), evaluated with one background solve.
    """
    system = factorization.system
    rhs = contrast_weights(factorization, delta_m) * p.values.ravel()
    solution, _ = factorization.solve(-(system.omega**2) * rhs)
    return np.asarray(solution, dtype=np.complex128)


def lippmann_schwinger_residual(
    p: ComplexField2D,
    p_s: ComplexField2D,
    v_bg: ScalarField2D,
    delta_m: ScalarField2D,
    omega: float,
    subgrid: BoolArray | None = None,
) -> float:
    """
    Relative residual of the discrete Lippmann–Schwinger equation.

    Builds the Green's columns over the support of `δm` explicitly and evaluates
    `r(x) = p(x) - p_s(x) - ω² Σ_y G(x, y)·δm(y)·p(y)·dx·dy`.

    Arguments:
        p: Total field.
        p_s: Background field for the same source.
        v_bg: Background velocity.
        delta_m: Slowness-squared contrast.
        omega: Angular frequency.
        subgrid: Boolean `(ny, nx)` mask of the nodes where the identity is checked, every
            node if not set.

    Returns:
        `‖r‖ / ‖p‖` over the subgrid.

    Raises:
        ResourceError: If the grid has more than `MAX_LS_NODES` nodes.
        ShapeError: If the inputs live on different grids.
    """
    grid = v_bg.grid
    for other in (p.grid, p_s.grid, delta_m.grid):
        grid.check_same(other)
    if grid.size > MAX_LS_NODES:
        raise ResourceError(f"Lippmann–Schwinger check supports at most {MAX_LS_NODES} nodes.")

    subgrid = np.ones(grid.shape, dtype=bool) if subgrid is None else subgrid
    if subgrid.shape != grid.shape:
        raise ShapeError("Subgrid mask does not match the grid.")

    factorization = background_factorization(v_bg, omega)
    weights = contrast_weights(factorization, delta_m)
    support = np.flatnonzero(weights)
    if support.size > 0:
        columns = greens_columns(factorization, support)
        integral = omega**2 * (columns @ (weights[support] * p.values.ravel()[support])) * grid.cell_area
    else:
        integral = np.zeros(grid.size, dtype=np.complex128)

    r = (p.values.ravel() - p_s.values.ravel() - integral)[subgrid.ravel()]
    denominator = float(np.linalg.norm(p.values.ravel()[subgrid.ravel()]))
    return float(np.linalg.norm(r)) / denominator if denominator > 0 else float(np.linalg.norm(r))


def born_series(
    p_s: ComplexField2D,
    v_bg: ScalarField2D,
    delta_m: ScalarField2D,
    omega: float,
    order: int,
    *,
    factorization: Factorization | None = None,
) -> list[ComplexField2D]:
    """
    Iterates `p_{k+1} = p_s + ω²·G·(δm·p_k)` starting from `p_0 = p_s`.

    The first iterate is the Born approximation. The iteration converges to the total field
    for weak contrasts.

    Returns:
        The iterates `p_1, ..., p_order`.

    Raises:
        DomainError: If `order` is smaller than 1.
    """
    if order < 1:
        raise DomainError("Born series order must be at least 1.")

    factorization = background_factorization(v_bg, omega) if factorization is None else factorization
    iterates: list[ComplexField2D] = []
    current = p_s
    for _ in range(order):
        current = to_field(p_s.values.ravel() + scatter(factorization, delta_m, current), p_s.grid)
        iterates.append(current)

    return iterates
