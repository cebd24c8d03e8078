import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helmsplit.errors import DegenerateFieldError, DomainError, ShapeError
from helmsplit.fields import (
    ComplexField2D,
    Frequency,
    Grid2D,
    ScalarField2D,
    dft2_forward,
    dft2_inverse,
    field_rel_l2,
    nearest_indices,
    resample_nearest,
)


def test_grid_geometry() -> None:
    grid = Grid2D(nx=5, ny=3, lx=400.0, ly=100.0)
    assert grid.dx == 100.0
    assert grid.dy == 50.0
    assert grid.shape == (3, 5)
    assert grid.size == 15
    assert grid.cell_area == 5000.0
    xx, yy = grid.meshgrid()
    assert xx.shape == yy.shape == (3, 5)
    assert xx[0, -1] == 400.0
    assert yy[-1, 0] == 100.0


@pytest.mark.parametrize(
    ("nx", "ny", "lx", "ly"),
    (
        (1, 4, 1.0, 1.0),
        (4, 1, 1.0, 1.0),
        (4, 4, 0.0, 1.0),
        (4, 4, 1.0, -2.0),
    ),
)
def test_grid_rejects_degenerate(nx: int, ny: int, lx: float, ly: float) -> None:
    with pytest.raises(DomainError):
        Grid2D(nx=nx, ny=ny, lx=lx, ly=ly)


def test_scalar_field_contracts() -> None:
    grid = Grid2D(nx=3, ny=2, lx=1.0, ly=1.0)
    with pytest.raises(ShapeError):
        ScalarField2D(grid, np.zeros((3, 2)))
    with pytest.raises(DomainError):
        ScalarField2D(grid, np.full((2, 3), np.nan))
    with pytest.raises(DomainError):
        ScalarField2D(grid, np.full((2, 3), 0.5), kind="mask")
    with pytest.raises(DomainError):
        ScalarField2D(grid, np.full((2, 3), 1.5), kind="fraction")

    mask = ScalarField2D(grid, np.eye(2, 3), kind="mask")
    assert mask.kind == "mask"
    with pytest.raises(ValueError):
        mask.values[0, 0] = 2.0


def test_complex_field_arithmetic() -> None:
    grid = Grid2D(nx=4, ny=4, lx=3.0, ly=3.0)
    a = ComplexField2D(grid, np.full(grid.shape, 1 + 2j))
    b = ComplexField2D(grid, np.full(grid.shape, 0.5j))
    assert np.all((a + b).values == 1 + 2.5j)
    assert np.all((a - b).values == 1 + 1.5j)
    assert np.all(a.scale(2j).values == 2j * (1 + 2j))
    assert np.all(ComplexField2D.zeros(grid).values == 0)

    other = ComplexField2D.zeros(Grid2D(nx=4, ny=4, lx=3.0, ly=6.0))
    with pytest.raises(ShapeError):
        a + other


def test_frequency() -> None:
    assert Frequency(1.0).omega == pytest.approx(2 * np.pi)
    with pytest.raises(DomainError):
        Frequency(0.0)


def test_field_rel_l2() -> None:
    grid = Grid2D(nx=2, ny=2, lx=1.0, ly=1.0)
    target = ComplexField2D(grid, np.array([[3.0, 0.0], [0.0, 4.0j]]))
    pred = ComplexField2D(grid, np.array([[3.0, 0.0], [0.0, 0.0]]))
    assert field_rel_l2(pred, target) == pytest.approx(0.8)
    assert field_rel_l2(target, target) == 0.0
    with pytest.raises(DegenerateFieldError):
        field_rel_l2(target, ComplexField2D.zeros(grid))


def test_dft2_is_unitary_and_invertible() -> None:
    rng = np.random.default_rng(3)
    grid = Grid2D(nx=8, ny=6, lx=1.0, ly=1.0)
    field = ComplexField2D(grid, rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape))
    coeffs = dft2_forward(field)
    assert np.linalg.norm(coeffs) == pytest.approx(np.linalg.norm(field.values))
    assert np.allclose(dft2_inverse(coeffs, grid).values, field.values, atol=1e-12)
    with pytest.raises(ShapeError):
        dft2_inverse(coeffs.T, grid)


@settings(max_examples=30, deadline=None)
@given(
    a=st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
    b=st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
    seed=st.integers(0, 2**16),
)
def test_dft2_is_linear(a: complex, b: complex, seed: int) -> None:
    rng = np.random.default_rng(seed)
    grid = Grid2D(nx=16, ny=16, lx=1.0, ly=1.0)
    f, g = (rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape) for _ in range(2))
    combined = dft2_forward(ComplexField2D(grid, a * f + b * g))
    expected = a * dft2_forward(ComplexField2D(grid, f)) + b * dft2_forward(ComplexField2D(grid, g))
    assert np.allclose(combined, expected, rtol=0, atol=1e-12 * (1 + abs(a) + abs(b)) * 16)


def test_nearest_indices_ties_go_low() -> None:
    idx = nearest_indices(1.0, 4, np.array([0.0, 0.5, 1.49, 1.5, 2.51, 10.0, -3.0]))
    assert idx.tolist() == [0, 0, 1, 1, 3, 3, 0]


def test_resample_nearest_keeps_kind() -> None:
    src_grid = Grid2D(nx=3, ny=3, lx=2.0, ly=2.0)
    src = ScalarField2D(src_grid, np.arange(9, dtype=float).reshape(3, 3))
    assert resample_nearest(src, src_grid) is src

    dst = resample_nearest(src, Grid2D(nx=5, ny=5, lx=2.0, ly=2.0))
    assert dst.values[0].tolist() == [0.0, 0.0, 1.0, 1.0, 2.0]
    assert dst.values[:, 0].tolist() == [0.0, 0.0, 3.0, 3.0, 6.0]

    mask = ScalarField2D(src_grid, np.eye(3), kind="mask")
    assert resample_nearest(mask, Grid2D(nx=7, ny=7, lx=2.0, ly=2.0)).kind == "mask"
