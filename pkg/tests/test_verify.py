import numpy as np
import pytest

from helmsplit.verify import (
    CheckResult,
    blob_bump,
    check_born_order,
    check_convergence,
    check_generation_determinism,
    check_gradients,
    check_grf_lags,
    check_grf_oracle,
    check_hybrid_composition,
    check_lippmann_schwinger,
    check_spectral_oracle,
    check_superposition,
    check_training_protocol,
    dense_dft_matrix,
    manufactured_solution,
    run_checks,
)

from .data import small_grid, small_plan


def test_check_result() -> None:
    assert CheckResult.below("a", 1.0, 2.0).passed
    assert not CheckResult.below("a", 2.0, 2.0).passed
    assert CheckResult.above("b", 2.0, 2.0).passed
    assert CheckResult.below("gap", 0.5, 1.0, "3 samples").describe() == (
        "PASS gap: 5.0000e-01 (limit 1.0000e+00) 3 samples"
    )
    assert CheckResult("gap", False, 2.0, 1.0).describe().startswith("FAIL gap")


def test_dense_dft_is_unitary() -> None:
    m = dense_dft_matrix(6)
    assert abs(m @ m.conj().T - np.eye(6)).max() < 1e-12


def test_blob_bump_is_compact() -> None:
    grid = small_grid()
    bump = blob_bump(grid, radius=60.0)
    assert bump.max() <= 1.0
    assert bump[0, 0] == 0.0
    assert bump[12, 12] > 0.9


def test_manufactured_solution_has_a_free_surface() -> None:
    solution = manufactured_solution(16)
    assert solution.error < 0.1
    assert abs(solution.exact.values[0]).max() < 1e-12
    assert solution.spacing == pytest.approx(1000.0 / 15)


@pytest.mark.parametrize(
    "check",
    (check_spectral_oracle, check_hybrid_composition, check_lippmann_schwinger),
)
def test_fast_checks_pass(check: object) -> None:
    result = check()  # type: ignore[operator]
    assert result.passed, result.describe()


def test_training_protocol_checks_pass() -> None:
    results = check_training_protocol()
    assert [r.name for r in results] == ["learning rate schedule", "dataset split", "AdamW step"]
    assert all(r.passed for r in results), [r.describe() for r in results]


def test_grf_oracle_with_few_samples() -> None:
    result = check_grf_oracle(samples=2000)
    assert result.value < 0.5


@pytest.mark.slow
@pytest.mark.parametrize(
    "check",
    (check_convergence, check_born_order, check_grf_lags, lambda: check_grf_oracle(20000)),
)
def test_statistical_and_convergence_checks_pass(check: object) -> None:
    result = check()  # type: ignore[operator]
    assert result.passed, result.describe()


@pytest.mark.slow
def test_gradient_checks_pass() -> None:
    results = check_gradients()
    assert len(results) == 7
    assert all(r.passed for r in results), [r.describe() for r in results]


@pytest.mark.slow
def test_generation_checks_pass() -> None:
    plan = small_plan()
    assert check_superposition(plan, 2).passed
    assert check_generation_determinism(plan).passed


@pytest.mark.slow
def test_quick_suite() -> None:
    results = run_checks(small_plan(), quick=True)
    assert len(results) == 19
    assert all(r.passed for r in results), [r.describe() for r in results if not r.passed]
