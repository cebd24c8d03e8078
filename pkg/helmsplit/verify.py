"""
Verification suite: exact identities, oracle comparisons and convergence studies.

Every check returns a `CheckResult`; `run_checks()` runs the complete suite behind the
`verify` command. The problem builders are public so that the test suite can reuse them.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import TypeAlias

import numpy as np
import torch
from torch import Tensor, nn

from .dataset import GenerationPlan, generate_record
from .errors import HelmsplitError
from .fields import ComplexField2D, Frequency, Grid2D, ScalarField2D, field_rel_l2
from .geomodel import MaternParams, MollifierSpec, matern_cov, sample_grf_exact, sample_grf_spectral
from .gradcheck import grad_check
from .helmholtz import assemble, factorize, gaussian_point_source, solve_background, solve_full, to_field
from .layers import (
    PatchEmbed,
    SpectralConv2d,
    SwinBlock,
    WindowAttention,
    kept_mode_indices,
    window_attention,
)
from .models import FnoConfig, HybridModel, VitConfig, build_model
from .scattering import born_series, lippmann_schwinger_residual
from .training import AdamWState, TrainConfig, adamw_step, lr_at, split_dataset
from .typing import ComplexArray, RealArray
from .utils import derive_seed

logger = logging.getLogger(__name__)

CONVERGENCE_ORDER_MIN = 1.8
SUPERPOSITION_RTOL = 1e-8
LS_RESIDUAL_MAX = 1e-6
BORN_ORDER_RANGE = (1.8, 2.2)
GRF_LAG_RTOL = 0.15
GRF_ORACLE_ATOL = 0.15
SPECTRAL_ORACLE_ATOL = 1e-12
GRAD_CHECK_RTOL = 1e-5
PROTOCOL_ATOL = 1e-12


@dataclass(frozen=True, slots=True)
class CheckResult:
    """Outcome of one verification check."""

    name: str
    passed: bool
    value: float
    """The measured quantity."""
    threshold: float
    """The limit the quantity was compared with."""
    detail: str = ""

    @classmethod
    def below(cls, name: str, value: float, limit: float, detail: str = "") -> "CheckResult":
        return cls(name=name, passed=bool(value < limit), value=value, threshold=limit, detail=detail)

    @classmethod
    def above(cls, name: str, value: float, limit: float, detail: str = "") -> "CheckResult":
        return cls(name=name, passed=bool(value >= limit), value=value, threshold=limit, detail=detail)

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: {self.value:.4e} (limit {self.threshold:.4e})"
        return f"{text} {self.detail}" if self.detail else text


# -- Solver convergence


@dataclass(frozen=True, slots=True)
class ManufacturedSolution:
    """Numerical and exact fields of a manufactured problem."""

    numerical: ComplexField2D
    exact: ComplexField2D

    @property
    def spacing(self) -> float:
        return self.exact.grid.dx

    @property
    def error(self) -> float:
        return field_rel_l2(self.numerical, self.exact)


def manufactured_solution(
    n: int, *, length: float = 1000.0, frequency: float = 3.0
) -> ManufacturedSolution:
    """
    Solves the discrete problem whose exact continuum solution is `p* = sin(k₁y)·exp(ik₂x)`.

    The velocity is smooth and variable, the source is the continuum residual of `p*` and
    the absorbing edges carry the Robin data of `p*`. The free surface `y = 0` is a zero of
    `p*`.
    """
    grid = Grid2D(nx=n, ny=n, lx=length, ly=length)
    omega = Frequency(frequency).omega
    xx, yy = grid.meshgrid()
    v = 2000.0 * (1.0 + 0.1 * np.sin(math.pi * xx / length) * np.sin(math.pi * yy / length))
    k1, k2 = 1.5 * math.pi / length, math.pi / length
    exact = np.sin(k1 * yy) * np.exp(1j * k2 * xx)
    dpx = 1j * k2 * exact
    dpy = k1 * np.cos(k1 * yy) * np.exp(1j * k2 * xx)
    source = ((k1**2 + k2**2) - omega**2 / v**2) * exact

    system = assemble(ScalarField2D(grid, v), omega)
    jj, ii = np.indices(grid.shape)
    open_edge = ~system.dirichlet
    impedance = 1j * omega / v * exact
    b = -source
    b = b - np.where(open_edge & (ii == 0), 2.0 * (-dpx - impedance) / grid.dx, 0.0)
    b = b - np.where(open_edge & (ii == n - 1), 2.0 * (dpx - impedance) / grid.dx, 0.0)
    b = b - np.where(open_edge & (jj == n - 1), 2.0 * (dpy - impedance) / grid.dy, 0.0)
    b = system.row_weights * b
    b[system.dirichlet] = 0.0
    solution, _ = factorize(system).solve(np.asarray(b, dtype=np.complex128).ravel())
    return ManufacturedSolution(numerical=to_field(solution, grid), exact=ComplexField2D(grid, exact))


def convergence_order(sizes: Sequence[int] = (32, 64, 128)) -> tuple[float, list[float]]:
    """Observed order of the finest refinement pair and the error of every grid."""
    solutions = [manufactured_solution(n) for n in sizes]
    errors = [s.error for s in solutions]
    coarse, fine = solutions[-2], solutions[-1]
    order = math.log(coarse.error / fine.error) / math.log(coarse.spacing / fine.spacing)
    return order, errors


def check_convergence(sizes: Sequence[int] = (32, 64, 128)) -> CheckResult:
    order, errors = convergence_order(sizes)
    detail = "errors " + ", ".join(f"{e:.3e}" for e in errors)
    return CheckResult.above("solver convergence order", order, CONVERGENCE_ORDER_MIN, detail)


# -- Superposition and determinism


def superposition_gaps(plan: GenerationPlan, n_samples: int) -> tuple[list[float], dict[int, str]]:
    """`‖(p_bg + δp) - p‖ / ‖p‖` of generated samples, and the reasons of failed samples."""
    gaps: list[float] = []
    failures: dict[int, str] = {}
    for index in range(n_samples):
        try:
            record = generate_record(plan, index)
        except HelmsplitError as e:
            failures[index] = f"{type(e).__name__}: {e}"
            continue

        total = record.require("p_bg") + record.require("delta_p")
        gaps.append(field_rel_l2(total, record.require("p")))

    return gaps, failures


def check_superposition(plan: GenerationPlan, n_samples: int) -> CheckResult:
    gaps, failures = superposition_gaps(plan, n_samples)
    worst = max(gaps, default=math.inf)
    if failures:
        detail = f"{len(failures)} samples failed"
        return CheckResult("superposition", False, worst, SUPERPOSITION_RTOL, detail)

    return CheckResult.below("superposition", worst, SUPERPOSITION_RTOL, f"{len(gaps)} samples")


def check_generation_determinism(plan: GenerationPlan) -> CheckResult:
    first, second = generate_record(plan, 0), generate_record(plan, 0)
    gap = 0.0
    for name in first.fields:
        a, b = first.require(name), second.require(name)  # type: ignore[call-overload]
        gap = max(gap, float(np.max(np.abs(a.values - b.values))))
    return CheckResult("generation determinism", gap == 0.0, gap, 0.0)


# -- Lippmann–Schwinger


@dataclass(frozen=True, slots=True)
class ScatteringProblem:
    """Background and total fields of a compact contrast on a small grid."""

    v_bg: ScalarField2D
    v: ScalarField2D
    delta_m: ScalarField2D
    omega: float
    p_s: ComplexField2D
    p: ComplexField2D


def blob_bump(grid: Grid2D, radius: float = 200.0) -> RealArray:
    """Smooth compactly supported bump `(1 - r²/R²)²` in the middle of the domain."""
    xx, yy = grid.meshgrid()
    r2 = ((xx - grid.lx / 2) ** 2 + (yy - grid.ly / 2) ** 2) / radius**2
    return np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)


def scattering_problem(
    *,
    n: int = 24,
    contrast: float | None = None,
    v_background: float = 2000.0,
    frequency: float = 3.0,
) -> ScatteringProblem:
    """
    A single interior blob on an `n x n` grid of 1 km².

    Arguments:
        contrast: Relative slowness-squared contrast `ε` with `δm = ε·bump·v_bg⁻²`. A salt-like
            blob with up to 1500 m/s velocity contrast if not set.
    """
    grid = Grid2D(nx=n, ny=n, lx=1000.0, ly=1000.0)
    omega = Frequency(frequency).omega
    bump = blob_bump(grid)
    v_bg = ScalarField2D.constant(grid, v_background)
    if contrast is None:
        v = v_background + 1500.0 * bump
    else:
        v = v_background / np.sqrt(1.0 + contrast * bump)

    velocity = ScalarField2D(grid, v)
    delta_m = ScalarField2D(grid, v**-2 - v_bg.values**-2)
    source = gaussian_point_source(grid, (grid.lx / 2, 80.0), 40.0)
    p_s, _ = solve_background(v_bg, source, omega)
    p, _ = solve_full(velocity, source, omega)
    return ScatteringProblem(v_bg=v_bg, v=velocity, delta_m=delta_m, omega=omega, p_s=p_s, p=p)


def check_lippmann_schwinger() -> CheckResult:
    problem = scattering_problem()
    residual = lippmann_schwinger_residual(
        problem.p, problem.p_s, problem.v_bg, problem.delta_m, problem.omega
    )
    return CheckResult.below("Lippmann-Schwinger residual", residual, LS_RESIDUAL_MAX)


def born_error(contrast: float) -> float:
    """Relative error of the first Born iterate for a weak blob of the given contrast."""
    problem = scattering_problem(contrast=contrast)
    (born,) = born_series(problem.p_s, problem.v_bg, problem.delta_m, problem.omega, 1)
    return field_rel_l2(born, problem.p)


def born_order(contrasts: tuple[float, float] = (1e-2, 1e-3)) -> float:
    """Fitted order of the Born error in the contrast."""
    e1, e2 = born_error(contrasts[0]), born_error(contrasts[1])
    return math.log(e1 / e2) / math.log(contrasts[0] / contrasts[1])


def check_born_order() -> CheckResult:
    order = born_order()
    low, high = BORN_ORDER_RANGE
    detail = f"accepted range [{low}, {high}]"
    return CheckResult("Born error order", low <= order <= high, order, low, detail)


# -- Random fields


def empirical_lag_covariance(
    params: MaternParams, shape: tuple[int, int], seeds: int, lags: Sequence[int]
) -> RealArray:
    """Covariance of spectral samples at axis-aligned lags, averaged over both axes and all seeds."""
    sums = np.zeros(len(lags))
    counts = np.zeros(len(lags))
    for seed in range(seeds):
        field = sample_grf_spectral(shape, params, derive_seed(seed))
        for k, lag in enumerate(lags):
            if lag == 0:
                products = [field * field]
            else:
                products = [field[:, :-lag] * field[:, lag:], field[:-lag, :] * field[lag:, :]]
            sums[k] += sum(float(p.sum()) for p in products)
            counts[k] += sum(p.size for p in products)

    return sums / counts


def check_grf_lags(params: MaternParams | None = None, seeds: int = 500) -> CheckResult:
    params = MaternParams(ell=10.0) if params is None else params
    lags = [0, round(params.ell / 2), round(params.ell), round(2 * params.ell)]
    empirical = empirical_lag_covariance(params, (64, 64), seeds, lags)
    exact = matern_cov(np.asarray(lags, dtype=np.float64), params)
    worst = float(np.max(np.abs(empirical - exact) / exact))
    return CheckResult.below("GRF lag covariance", worst, GRF_LAG_RTOL, f"lags {lags}")


def sample_covariance(draw: Callable[[int], RealArray], samples: int) -> RealArray:
    """Empirical covariance matrix of zero-mean flattened draws `draw(0), ..., draw(samples - 1)`."""
    stack = np.stack([draw(i).ravel() for i in range(samples)])
    return stack.T @ stack / samples


def grf_oracle_gap(params: MaternParams | None = None, samples: int = 20000) -> float:
    """Max-entry gap between spectral and dense-Cholesky empirical covariances on an 8x8 lattice."""
    params = MaternParams(ell=3.0) if params is None else params
    spectral = sample_covariance(lambda i: sample_grf_spectral((8, 8), params, derive_seed(1, i)), samples)
    exact = sample_covariance(lambda i: sample_grf_exact((8, 8), params, derive_seed(2, i)), samples)
    return float(np.max(np.abs(spectral - exact))) / params.sigma2


def check_grf_oracle(samples: int = 20000) -> CheckResult:
    return CheckResult.below("GRF spectral vs exact", grf_oracle_gap(samples=samples), GRF_ORACLE_ATOL)


# -- Layers


def dense_dft_matrix(n: int) -> ComplexArray:
    """Unitary DFT matrix."""
    k = np.arange(n)
    return np.exp(-2j * math.pi * np.outer(k, k) / n) / math.sqrt(n)


def spectral_conv_oracle(x: RealArray, weights: ComplexArray) -> RealArray:
    """Spectral convolution of a `(C_in, ny, nx)` input with dense DFT matrices."""
    _, ny, nx = x.shape
    c_out, my, mx = weights.shape[1:]
    fy, fx = dense_dft_matrix(ny), dense_dft_matrix(nx)
    coeffs = np.einsum("ky,cyx,lx->ckl", fy, x, fx)
    iy = kept_mode_indices(ny, my).numpy()
    ix = kept_mode_indices(nx, mx).numpy()
    out = np.zeros((c_out, ny, nx), dtype=np.complex128)
    block = (iy[:, None], ix[None, :])
    out[:, block[0], block[1]] = np.einsum("ikl,iokl->okl", coeffs[:, block[0], block[1]], weights)
    return np.einsum("ky,okl,lx->oyx", fy.conj(), out, fx.conj()).real


def check_spectral_oracle(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 8, 8))
    weights = rng.standard_normal((3, 2, 3, 4)) + 1j * rng.standard_normal((3, 2, 3, 4))
    layer = SpectralConv2d(3, 2, 3, 4).double()
    with torch.no_grad():
        layer.weight.copy_(torch.view_as_real(torch.from_numpy(weights)))
        y = layer(torch.from_numpy(x)).numpy()

    gap = float(np.max(np.abs(y - spectral_conv_oracle(x, weights))))
    return CheckResult.below("spectral conv vs dense DFT", gap, SPECTRAL_ORACLE_ATOL)


def tiny_fno_config() -> FnoConfig:
    return FnoConfig(
        n_layers=2, hidden_channels=4, modes_x=2, modes_y=2, lifting_channels=6, projection_channels=6
    )


def tiny_vit_config() -> VitConfig:
    return VitConfig(depth=2, embed_dim=8, patch_size=2, window_size=2, n_heads=2, mlp_ratio=2.0)


def tiny_hybrid(grid_shape: tuple[int, int] = (8, 8), *, seed: int = 0) -> HybridModel:
    """Untrained double-precision hybrid with identity normalization."""
    fno = build_model("fno", tiny_fno_config(), 4, grid_shape, seed=seed)
    vit = build_model("vit", tiny_vit_config(), 5, grid_shape, seed=seed + 1)
    return HybridModel(fno, vit, MollifierSpec()).double()  # type: ignore[arg-type]


GradientCase: TypeAlias = tuple[Callable[..., Tensor] | nn.Module, list[Tensor], list[Tensor]]
"""`(op, checked tensors, inputs)` of a gradient check."""


def gradient_cases(seed: int = 0) -> dict[str, GradientCase]:
    """
    Double-precision `(op, checked tensors, inputs)` of every differentiable block.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        spectral = SpectralConv2d(2, 3, 2, 3).double()
        field = torch.randn(2, 2, 8, 8, dtype=torch.float64)
        embed = PatchEmbed(3, 8, 2, (4, 4)).double()
        embed_input = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        attention = WindowAttention(8, 2, 2).double()
        tokens = torch.randn(1, 4, 4, 8, dtype=torch.float64)
        block = SwinBlock(8, 2, 2, 1, 2.0).double()
        fno = build_model("fno", tiny_fno_config(), 4, (8, 8), seed=seed).double()
        fno_input = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        vit = build_model("vit", tiny_vit_config(), 5, (8, 8), seed=seed).double()
        vit_input = torch.randn(2, 5, 8, 8, dtype=torch.float64)
        hybrid = tiny_hybrid(seed=seed)
        delta_v = torch.randn(2, 8, 8, dtype=torch.float64)

    def shifted_attention(x: Tensor) -> Tensor:
        return window_attention(x, attention, 1)

    return {
        "spectral conv": (spectral, [*spectral.parameters(), field], [field]),
        "patch embedding": (embed, [*embed.parameters(), embed_input], [embed_input]),
        "shifted window attention": (shifted_attention, [*attention.parameters(), tokens], [tokens]),
        "transformer block": (block, [*block.parameters(), tokens], [tokens]),
        "FNO": (fno, list(fno.parameters()), [fno_input]),
        "transformer": (vit, list(vit.parameters()), [vit_input]),
        "hybrid": (hybrid, list(hybrid.parameters()), [fno_input, delta_v]),
    }


def check_gradients(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, (op, params, inputs) in gradient_cases(seed).items():
        error = grad_check(op, params, *inputs, seed=seed)
        results.append(CheckResult.below(f"grad check: {name}", error, GRAD_CHECK_RTOL))

    return results


def check_hybrid_composition(seed: int = 0) -> CheckResult:
    hybrid = tiny_hybrid(seed=seed)
    generator = torch.Generator().manual_seed(seed)
    fno_input = torch.randn(2, 4, 8, 8, dtype=torch.float64, generator=generator)
    delta_v = torch.randn(2, 8, 8, dtype=torch.float64, generator=generator)
    with torch.no_grad():
        out = hybrid.branches(fno_input, delta_v)
        gap = float((out.total - (out.background + out.scattered)).abs().max())
        gap = max(gap, float((out.background - hybrid.fno(fno_input)).abs().max()))

    return CheckResult("hybrid composition", gap == 0.0, gap, 0.0)


# -- Training protocol


def check_training_protocol() -> list[CheckResult]:
    cfg = TrainConfig()
    steps = 10
    warmup, total = cfg.warmup_epochs * steps, cfg.epochs * steps
    schedule_gap = max(
        abs(lr_at(warmup, steps, cfg) - 1e-3),
        abs(lr_at(total, steps, cfg)),
        abs(lr_at(warmup + (total - warmup) // 2, steps, cfg) - 5e-4),
    )
    sizes = tuple(len(part) for part in split_dataset(50_000, seed=0))

    lr = 1e-3
    theta = [torch.zeros(1, dtype=torch.float64)]
    grad = [torch.full((1,), 3.0, dtype=torch.float64)]
    no_decay = cfg.model_copy(update={"weight_decay": 0.0})
    (step,), _ = adamw_step(theta, grad, AdamWState.zeros(theta), no_decay, lr)
    adam_gap = abs(float(step) + lr * 3.0 / (3.0 + cfg.eps))
    decayed = [torch.full((1,), 2.0, dtype=torch.float64)]
    zero = [torch.zeros(1, dtype=torch.float64)]
    decay = cfg.model_copy(update={"weight_decay": 0.1})
    (shrunk,), _ = adamw_step(decayed, zero, AdamWState.zeros(decayed), decay, lr)
    adam_gap = max(adam_gap, abs(float(shrunk) - 2.0 * (1 - lr * 0.1)))

    return [
        CheckResult("learning rate schedule", schedule_gap == 0.0, schedule_gap, 0.0),
        CheckResult(
            "dataset split", sizes == (40_000, 5_000, 5_000), float(sizes[0]), 40_000.0, f"sizes {sizes}"
        ),
        CheckResult.below("AdamW step", adam_gap, PROTOCOL_ATOL),
    ]


def run_checks(
    plan: GenerationPlan,
    *,
    superposition_samples: int = 100,
    quick: bool = False,
) -> list[CheckResult]:
    """
    Runs the verification suite.

    Arguments:
        plan: Generation settings of the superposition and determinism checks.
        superposition_samples: Number of generated samples checked for superposition.
        quick: Fewer samples for the statistical checks and at most 3 superposition samples.
    """
    n_superposition = min(superposition_samples, 3) if quick else superposition_samples
    stages: list[Callable[[], CheckResult | list[CheckResult]]] = [
        lambda: check_superposition(plan, n_superposition),
        lambda: check_generation_determinism(plan),
        check_convergence,
        check_lippmann_schwinger,
        check_born_order,
        check_grf_lags,
        lambda: check_grf_oracle(5000 if quick else 20000),
        check_spectral_oracle,
        check_gradients,
        check_hybrid_composition,
        check_training_protocol,
    ]
    results: list[CheckResult] = []
    for stage in stages:
        outcome = stage()
        for result in outcome if isinstance(outcome, list) else [outcome]:
            (logger.info if result.passed else logger.error)(result.describe())
            results.append(result)

    return results
