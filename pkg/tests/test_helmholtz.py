import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest

from helmsplit.errors import (
    DegenerateFieldError,
    DomainError,
    ResolutionWarning,
    ShapeError,
    SolverError,
)
from helmsplit.fields import ComplexField2D, Grid2D, ScalarField2D, field_rel_l2
from helmsplit.helmholtz import (
    BoundaryTag,
    SolverSettings,
    SourceSpec,
    assemble,
    boundary_tags,
    dump_coo,
    factorize,
    gaussian_point_source,
    pde_residual,
    points_per_wavelength,
    solve_background,
    solve_full,
    solve_residual,
)

from .data import small_grid

OMEGA = 2 * math.pi * 10.0


def velocity_with_inclusion(grid: Grid2D, margin: int = 4) -> tuple[ScalarField2D, ScalarField2D]:
    """A constant background and a copy with a fast block away from the absorbing edges."""
    v_bg = np.full(grid.shape, 1500.0)
    v = v_bg.copy()
    v[margin + 4 : -margin, margin:-margin] = 3000.0
    return ScalarField2D(grid, v), ScalarField2D(grid, v_bg)


def test_boundary_tags() -> None:
    tags = boundary_tags(Grid2D(nx=4, ny=3, lx=1.0, ly=1.0))
    assert tags[0].tolist() == [BoundaryTag.FREE_TOP] * 4
    assert tags[1].tolist() == [BoundaryTag.ABC_LEFT, 0, 0, BoundaryTag.ABC_RIGHT]
    bottom = [BoundaryTag.CORNER, BoundaryTag.ABC_BOTTOM, BoundaryTag.ABC_BOTTOM, BoundaryTag.CORNER]
    assert tags[2].tolist() == bottom

    dirichlet = boundary_tags(Grid2D(nx=4, ny=4, lx=1.0, ly=1.0), "dirichlet")
    assert np.sum(dirichlet == BoundaryTag.FREE_TOP) == 12
    assert dirichlet[1, 1] == BoundaryTag.INTERIOR


def test_assembled_matrix_is_complex_symmetric() -> None:
    grid = small_grid()
    v, _ = velocity_with_inclusion(grid)
    system = assemble(v, OMEGA)
    assert system.matrix.shape == (grid.size, grid.size)
    assert abs(system.matrix - system.matrix.T).max() == 0
    assert np.iscomplexobj(system.matrix.data)

    top = system.matrix[: grid.nx].toarray()
    assert np.array_equal(top[:, : grid.nx], np.eye(grid.nx))
    assert not np.any(top[:, grid.nx :])

    assert system.row_weights[5, 0] == 0.5
    assert system.row_weights[-1, 5] == 0.5
    assert system.row_weights[-1, 0] == 0.25
    assert system.row_weights[5, 5] == 1.0


def test_rhs_is_weighted_and_zero_on_the_surface() -> None:
    grid = small_grid()
    system = assemble(ScalarField2D.constant(grid, 1500.0), OMEGA)
    source = np.ones(grid.shape, dtype=complex)
    b = system.rhs(source).reshape(grid.shape)
    assert np.all(b[0] == 0)
    assert b[5, 5] == -1.0
    assert b[5, 0] == -0.5
    assert b[-1, -1] == -0.25
    with pytest.raises(ShapeError):
        system.rhs(np.ones((3, 3)))


def test_solve_full_satisfies_the_discrete_equation() -> None:
    grid = small_grid()
    v, _ = velocity_with_inclusion(grid)
    source = SourceSpec(y=30.0, width=15.0).build(grid)
    p, report = solve_full(v, source, OMEGA)
    assert report.residual_norm < 1e-10
    assert report.iterations == 0
    assert np.all(p.values[0] == 0)
    assert np.linalg.norm(p.values) > 0
    assert pde_residual(p, v, source, OMEGA) < 1e-10


def test_symmetric_problem_has_symmetric_solution() -> None:
    grid = small_grid()
    source = SourceSpec(y=60.0, width=15.0).build(grid)
    p, _ = solve_full(ScalarField2D.constant(grid, 2000.0), source, OMEGA)
    assert np.allclose(p.values, p.values[:, ::-1], rtol=0, atol=1e-10 * np.abs(p.values).max())


def test_iterative_solver_matches_direct() -> None:
    grid = small_grid()
    v, _ = velocity_with_inclusion(grid)
    source = SourceSpec(y=30.0, width=15.0).build(grid)
    direct, _ = solve_full(v, source, OMEGA)
    iterative, report = solve_full(v, source, OMEGA, settings=SolverSettings(method="iterative"))
    assert report.iterations > 0
    assert field_rel_l2(iterative, direct) < 1e-4


def test_factorization_serves_many_right_hand_sides() -> None:
    grid = small_grid()
    system = assemble(ScalarField2D.constant(grid, 1500.0), OMEGA)
    handle = factorize(system)
    rng = np.random.default_rng(0)
    sources = rng.normal(size=(grid.size, 3)) + 0j
    sources[: grid.nx] = 0
    solution, report = handle.solve(sources)
    assert solution.shape == (grid.size, 3)
    assert report.residual_norm < 1e-10

    bare = dataclasses.replace(handle, lu=None, preconditioner=None)
    with pytest.raises(SolverError):
        bare.solve(sources)


def test_background_plus_residual_is_the_full_field() -> None:
    grid = small_grid()
    v, v_bg = velocity_with_inclusion(grid)
    source = SourceSpec(y=30.0, width=15.0).build(grid)
    p, _ = solve_full(v, source, OMEGA)
    p_bg, _ = solve_background(v_bg, source, OMEGA)
    delta_p, _ = solve_residual(v_bg, v, p_bg, OMEGA)
    assert field_rel_l2(p_bg + delta_p, p) < 1e-10
    assert np.linalg.norm(delta_p.values) > 1e-3 * np.linalg.norm(p.values)


def test_zero_contrast_has_zero_residual_field() -> None:
    grid = small_grid()
    v_bg = ScalarField2D.constant(grid, 1500.0)
    source = SourceSpec(y=30.0, width=15.0).build(grid)
    p_bg, _ = solve_background(v_bg, source, OMEGA)
    delta_p, _ = solve_residual(v_bg, v_bg, p_bg, OMEGA)
    assert np.all(delta_p.values == 0)


def test_assemble_validation() -> None:
    grid = small_grid()
    with pytest.raises(DomainError):
        assemble(ScalarField2D.constant(grid, -1.0), OMEGA)
    with pytest.raises(DomainError):
        assemble(ScalarField2D.constant(grid, 1500.0), -1.0)
    with pytest.raises(DomainError):
        assemble(ScalarField2D.constant(Grid2D(nx=3, ny=8, lx=1.0, ly=1.0), 1500.0), OMEGA)
    with pytest.raises(ShapeError):
        assemble(ScalarField2D.constant(grid, 1500.0), OMEGA, Grid2D(nx=8, ny=8, lx=1.0, ly=1.0))


def test_under_resolved_grid_warns_or_fails() -> None:
    grid = small_grid()
    slow = ScalarField2D.constant(grid, 500.0)
    assert points_per_wavelength(slow, OMEGA) == pytest.approx(5.0)
    with pytest.warns(ResolutionWarning):
        assemble(slow, OMEGA)
    with pytest.raises(DomainError):
        assemble(slow, OMEGA, settings=SolverSettings(strict_resolution=True))
    assert points_per_wavelength(slow, 0.0) == math.inf


def test_pde_residual_needs_a_source() -> None:
    grid = small_grid()
    v = ScalarField2D.constant(grid, 1500.0)
    with pytest.raises(DegenerateFieldError):
        pde_residual(ComplexField2D.zeros(grid), v, ComplexField2D.zeros(grid), OMEGA)


def test_gaussian_point_source() -> None:
    grid = small_grid()
    source = gaussian_point_source(grid, (110.0, 50.0), 20.0, amplitude=3.0)
    assert source.values.real.sum() * grid.cell_area == pytest.approx(3.0)
    assert np.unravel_index(np.argmax(source.values.real), grid.shape) == (5, 11)
    with pytest.raises(DomainError):
        gaussian_point_source(grid, (-1.0, 50.0), 20.0)
    with pytest.raises(DomainError):
        gaussian_point_source(grid, (10.0, 50.0), 0.0)


def test_dump_coo(tmp_path: Path) -> None:
    grid = Grid2D(nx=4, ny=4, lx=30.0, ly=30.0)
    system = assemble(ScalarField2D.constant(grid, 1500.0), 2 * math.pi * 5.0)
    path = tmp_path / "matrix.txt"
    dump_coo(system, path)
    lines = path.read_text().splitlines()
    assert lines[0].split()[:2] == ["4", "4"]
    assert float(lines[0].split()[2]) == system.omega
    assert len(lines) == system.matrix.nnz + 1
    row, col, re, im = lines[1].split()
    assert system.matrix[int(row), int(col)] == complex(float(re), float(im))


def test_solution_is_linear_in_the_source() -> None:
    grid = small_grid()
    v, _ = velocity_with_inclusion(grid)
    s1 = SourceSpec(y=30.0, width=15.0).build(grid)
    s2 = gaussian_point_source(grid, (60.0, 120.0), 20.0)
    combined = ComplexField2D(grid, 2.0 * s1.values - 0.5j * s2.values)
    p1, _ = solve_full(v, s1, OMEGA)
    p2, _ = solve_full(v, s2, OMEGA)
    p, _ = solve_full(v, combined, OMEGA)
    expected = ComplexField2D(grid, 2.0 * p1.values - 0.5j * p2.values)
    assert field_rel_l2(p, expected) < 1e-10
