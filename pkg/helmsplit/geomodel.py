"""
Procedural salt-body velocity models.

The pipeline: sample a 3D Matérn Gaussian random field, threshold it at the quantile that
yields the target salt fraction, pick a 2D slice with enough salt, clean it up with
morphological operations, blur it into a salt fraction, and form the sharp and smoothed
velocity models on the solver grid.
"""

import logging
import math
from dataclasses import dataclass
from typing import overload

import numpy as np
from pydantic import Field, PositiveFloat, model_validator
from scipy import fft as sp_fft
from scipy import ndimage
from scipy.spatial.distance import cdist
from scipy.special import gamma, kv

from .errors import DegenerateFieldError, DomainError, FactorizationError, ResourceError, ShapeError
from .fields import Grid2D, ScalarField2D, resample_nearest
from .typing import RealArray, Shape
from .utils import FrozenModel

logger = logging.getLogger(__name__)

EXACT_SAMPLER_MAX_NODES = 256
"""Largest node count accepted by the dense (Cholesky) sampler."""


class MaternParams(FrozenModel):
    """Matérn covariance parameters."""

    sigma2: PositiveFloat = 1.0
    """Marginal variance."""

    ell: PositiveFloat = 10.0
    """Correlation length, in the distance unit of the call (grid cells for the samplers)."""

    nu: PositiveFloat = 1.6
    """Smoothness."""


class SaltMaskSpec(FrozenModel):
    """Salt mask construction and cleanup settings."""

    rho_salt: float = Field(default=0.2, gt=0.0, lt=1.0)
    """Target salt volume fraction."""

    min_area: int = Field(default=0, ge=0)
    """Connected components with fewer cells are removed."""

    boundary_margin: int = Field(default=8, ge=0)
    """Width in cells of the strip along every edge that is forced to background."""

    morph_radius: int = Field(default=1, ge=0)
    """Radius of the square structuring element of the closing (and by default the opening)."""

    open_radius: int | None = Field(default=None, ge=0)
    """Radius of the opening, `morph_radius` if not set. `0` disables the opening."""

    min_fraction: float = Field(default=0.05, ge=0.0, le=1.0)
    """Minimum salt fraction of an acceptable slice."""

    min_blobs: int = Field(default=1, ge=0)
    """Minimum number of disjoint salt bodies of an acceptable slice."""


@dataclass(frozen=True, slots=True)
class VelocityPair:
    """
    Sharp velocity model, its smoothed background and the derived contrasts.

    All fields live on the solver grid.
    """

    v: ScalarField2D
    """Sharp wavespeed in m/s."""

    v_bg: ScalarField2D
    """Smoothed background wavespeed in m/s."""

    delta_v: ScalarField2D
    """Wavespeed contrast `v - v_bg` in m/s."""

    delta_m: ScalarField2D
    """Slowness-squared contrast `v⁻² - v_bg⁻²` in s²/m²."""

    alpha: ScalarField2D
    """Salt fraction that defines `v_bg`."""

    mask: ScalarField2D
    """Binary salt indicator that defines `v`."""

    @classmethod
    def from_velocities(
        cls, v: ScalarField2D, v_bg: ScalarField2D, *, alpha: ScalarField2D, mask: ScalarField2D
    ) -> "VelocityPair":
        """Creates the pair and computes the contrasts from `v` and `v_bg`."""
        v.grid.check_same(v_bg.grid)
        grid = v.grid
        return cls(
            v=v,
            v_bg=v_bg,
            delta_v=ScalarField2D(grid, v.values - v_bg.values),
            delta_m=ScalarField2D(grid, v.values**-2 - v_bg.values**-2),
            alpha=alpha,
            mask=mask,
        )

    @property
    def grid(self) -> Grid2D:
        """The solver grid."""
        return self.v.grid

    def check(self, *, atol: float = 1e-12) -> None:
        """
        Recomputes the contrasts and compares them with the stored ones.

        `delta_v` is compared in absolute terms, `delta_m` relative to `v_bg⁻²`.

        Raises:
            DomainError: If a stored contrast deviates from its definition.
        """
        dv = self.v.values - self.v_bg.values
        if np.max(np.abs(dv - self.delta_v.values)) > atol:
            raise DomainError("delta_v deviates from v - v_bg.")

        dm = self.v.values**-2 - self.v_bg.values**-2
        scale = float(np.max(self.v_bg.values**-2))
        if np.max(np.abs(dm - self.delta_m.values)) > atol * scale:
            raise DomainError("delta_m deviates from v^-2 - v_bg^-2.")


@overload
def matern_cov(r: float, params: MaternParams) -> float: ...


@overload
def matern_cov(r: RealArray, params: MaternParams) -> RealArray: ...


def matern_cov(r: float | RealArray, params: MaternParams) -> float | RealArray:
    """
    Matérn covariance `σ² 2^(1-ν)/Γ(ν) (r/ℓ)^ν K_ν(r/ℓ)` with the `r → 0` limit `σ²`.

    Arguments:
        r: Distance or array of distances, in the unit of `params.ell`.
        params: Kernel parameters.

    Raises:
        DomainError: If any distance is negative.
    """
    rr = np.asarray(r, dtype=np.float64)
    if np.any(rr < 0):
        raise DomainError("Distances must be non-negative.")

    nu = params.nu
    scaled = rr / params.ell
    # Below this lag the product underflows/overflows before it converges to the limit.
    tiny = scaled < 1e-12
    safe = np.where(tiny, 1.0, scaled)
    value = params.sigma2 * (2.0 ** (1.0 - nu) / gamma(nu)) * safe**nu * kv(nu, safe)
    value = np.where(tiny, params.sigma2, value)
    return float(value) if np.ndim(r) == 0 else value


def matern_spectral_density(k2: RealArray, params: MaternParams, dim: int) -> RealArray:
    """
    Spectral density of the Matérn kernel at squared angular wavenumbers `k2`.

    Normalized so that `C(r) = (2π)^-d ∫ S(k) exp(i k·r) dk` reproduces `matern_cov()`.
    """
    nu = params.nu
    kappa2 = params.ell**-2
    const = (
        params.sigma2
        * (2.0 * math.sqrt(math.pi)) ** dim
        * gamma(nu + dim / 2.0)
        / gamma(nu)
        * kappa2**nu
    )
    return np.asarray(const / (kappa2 + k2) ** (nu + dim / 2.0), dtype=np.float64)


def embedding_shape(shape: Shape, ell: float) -> Shape:
    """
    Periodic embedding used by `sample_grf_spectral()`: at least twice the domain and at least
    eight correlation lengths of padding per axis.
    """
    return tuple(sp_fft.next_fast_len(max(2 * n, n + math.ceil(8 * ell))) for n in shape)


def sample_grf_spectral(shape: Shape, params: MaternParams, seed: int) -> RealArray:
    """
    Samples a zero-mean stationary Matérn Gaussian random field on a 2D or 3D lattice.

    White noise on a periodic embedding is filtered with the square root of the Matérn
    spectral density on the DFT grid and the result is cropped to `shape`. Distances are in
    cells (unit spacing), so `params.ell` is a number of cells.

    Arguments:
        shape: `(ny, nx)` or `(nz, ny, nx)`.
        params: Kernel parameters.
        seed: Seed of the white noise, the result is fully determined by it.

    Raises:
        ShapeError: If `shape` is not 2D or 3D.
    """
    if len(shape) not in (2, 3) or min(shape) < 1:
        raise ShapeError(f"Expected a 2D or 3D shape, got {shape}.")

    padded = embedding_shape(shape, params.ell)
    axes_k = np.meshgrid(
        *(2.0 * math.pi * np.fft.fftfreq(m) for m in padded), indexing="ij", sparse=True
    )
    k2 = sum(k**2 for k in axes_k)
    amplitude = np.sqrt(matern_spectral_density(np.asarray(k2), params, len(shape)))

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(padded)
    field = sp_fft.ifftn(sp_fft.fftn(noise) * amplitude).real
    return np.ascontiguousarray(field[tuple(slice(0, n) for n in shape)])


def sample_grf_exact(
    shape: tuple[int, int], params: MaternParams, seed: int, *, spacing: float = 1.0
) -> RealArray:
    """
    Draws `φ ~ N(0, K)` with the dense Matérn covariance matrix of a small lattice.

    This is the distributional oracle of `sample_grf_spectral()`.

    Arguments:
        shape: `(ny, nx)` lattice shape.
        params: Kernel parameters.
        seed: Seed of the standard normal draw.
        spacing: Lattice spacing in the unit of `params.ell`.

    Raises:
        ResourceError: If the lattice has more than `EXACT_SAMPLER_MAX_NODES` nodes.
        FactorizationError: If the jittered covariance matrix is not positive definite.
    """
    n = shape[0] * shape[1]
    if n > EXACT_SAMPLER_MAX_NODES:
        raise ResourceError(f"Dense sampling supports at most {EXACT_SAMPLER_MAX_NODES} nodes, got {n}.")

    points = np.indices(shape, dtype=np.float64).reshape(2, -1).T * spacing
    cov = matern_cov(cdist(points, points), params)
    cov[np.diag_indices_from(cov)] += 1e-10 * params.sigma2
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as e:
        raise FactorizationError("Matérn covariance matrix is not positive definite.") from e

    rng = np.random.default_rng(seed)
    return np.asarray(factor @ rng.standard_normal(n), dtype=np.float64).reshape(shape)


def quantile_threshold(values: RealArray, rho: float) -> float:
    """
    Returns `τ` such that the fraction of `values > τ` is `rho` up to ties.

    `τ` is the sorted value at 0-based rank `⌈(1 - ρ)·N⌉ - 1`.

    Raises:
        DegenerateFieldError: If all values are equal.
    """
    flat = np.sort(values, axis=None)
    if flat[0] == flat[-1]:
        raise DegenerateFieldError("Cannot threshold a constant field.")

    rank = math.ceil((1.0 - rho) * flat.size - 1e-9) - 1
    return float(flat[min(max(rank, 0), flat.size - 1)])


def threshold_to_mask(field: ScalarField2D, rho_salt: float) -> ScalarField2D:
    """
    Binary mask of the nodes above the empirical `(1 - rho_salt)`-quantile of the field.

    Raises:
        DegenerateFieldError: If the field is constant.
    """
    tau = quantile_threshold(field.values, rho_salt)
    return ScalarField2D(field.grid, (field.values > tau).astype(np.float64), kind="mask")


def count_blobs(mask: RealArray) -> int:
    """Number of 4-connected salt bodies."""
    _, n = ndimage.label(mask > 0.5)
    return int(n)


def extract_slice(
    volume: RealArray, spec: SaltMaskSpec, grid: Grid2D, *, seed: int = 0
) -> ScalarField2D:
    """
    Selects a 2D salt mask from a thresholded 3D indicator volume.

    Slices are scanned in z-order (cyclically) from a seeded random start, the first one whose
    salt fraction is at least `spec.min_fraction` and which contains at least `spec.min_blobs`
    salt bodies is returned. If no slice qualifies, the scanned slice with the largest salt
    area is returned (the first one on ties).

    Arguments:
        volume: Binary volume of shape `(nz, ny, nx)`.
        spec: Mask settings with the acceptance thresholds.
        grid: The image grid of the slices.
        seed: Seed of the scan start.

    Raises:
        ShapeError: If the slices do not match `grid`.
    """
    if volume.ndim != 3 or volume.shape[1:] != grid.shape:
        raise ShapeError(f"Volume shape {volume.shape} does not match grid shape {grid.shape}.")

    nz = volume.shape[0]
    start = int(np.random.default_rng(seed).integers(nz))
    best_index, best_area = start, -1.0
    for offset in range(nz):
        index = (start + offset) % nz
        candidate = volume[index]
        area = float(np.sum(candidate > 0.5))
        if area / candidate.size >= spec.min_fraction and count_blobs(candidate) >= spec.min_blobs:
            logger.debug("Selected salt slice %d (fraction %.3f).", index, area / candidate.size)
            return ScalarField2D(grid, (candidate > 0.5).astype(np.float64), kind="mask")

        if area > best_area:
            best_index, best_area = index, area

    logger.info("No slice met the salt requirements, using slice %d with the largest area.", best_index)
    return ScalarField2D(grid, (volume[best_index] > 0.5).astype(np.float64), kind="mask")


def zero_margin(values: RealArray, margin: int) -> RealArray:
    """Returns a copy of `values` with a `margin`-wide strip along every edge set to zero."""
    result = np.array(values, copy=True)
    if margin > 0:
        result[:margin, :] = 0
        result[-margin:, :] = 0
        result[:, :margin] = 0
        result[:, -margin:] = 0

    return result


def clean_mask(mask: ScalarField2D, spec: SaltMaskSpec) -> ScalarField2D:
    """
    Removes small features from a binary salt mask.

    Applies a binary opening and then a closing with square structuring elements, removes
    4-connected components smaller than `spec.min_area` cells and finally zeros the
    `spec.boundary_margin` strip. The image is edge-padded during the morphological steps,
    so bodies that touch the edge are not eroded by the implicit background outside.
    """
    values = mask.values > 0.5
    open_radius = spec.morph_radius if spec.open_radius is None else spec.open_radius
    for radius, operation in (
        (open_radius, ndimage.binary_opening),
        (spec.morph_radius, ndimage.binary_closing),
    ):
        if radius > 0:
            padded = np.pad(values, radius, mode="edge")
            structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
            values = operation(padded, structure=structure)[radius:-radius, radius:-radius]

    if spec.min_area > 0:
        labels, _ = ndimage.label(values)
        areas = np.bincount(labels.ravel())
        keep = areas >= spec.min_area
        keep[0] = False
        values = keep[labels]

    result = zero_margin(values.astype(np.float64), spec.boundary_margin)
    return ScalarField2D(mask.grid, result, kind="mask")


def gaussian_blur_fraction(
    mask: ScalarField2D, sigma_salt: float, img_spacings: tuple[float, float] | None = None
) -> ScalarField2D:
    """
    Blurs a binary mask into a salt fraction with a separable Gaussian kernel.

    The pixel standard deviations are `sigma_salt / dy_img` and `sigma_salt / dx_img`. The
    kernel is truncated at 4σ and normalized to unit sum, the result is clipped to `[0, 1]`.

    Arguments:
        mask: Binary mask on the image grid.
        sigma_salt: Physical smoothing scale in meters, `0` returns the mask unchanged.
        img_spacings: `(dy_img, dx_img)`, the spacings of the mask's grid by default.

    Raises:
        DomainError: If `sigma_salt` is negative.
    """
    if sigma_salt < 0:
        raise DomainError("sigma_salt must be non-negative.")

    if sigma_salt == 0:
        return ScalarField2D(mask.grid, mask.values, kind="fraction")

    dy, dx = (mask.grid.dy, mask.grid.dx) if img_spacings is None else img_spacings
    blurred = ndimage.gaussian_filter(
        mask.values, sigma=(sigma_salt / dy, sigma_salt / dx), mode="nearest", truncate=4.0
    )
    return ScalarField2D(mask.grid, np.clip(blurred, 0.0, 1.0), kind="fraction")


def build_velocity_pair(
    mask: ScalarField2D,
    alpha: ScalarField2D,
    v_background: ScalarField2D | float,
    v_salt: float,
    solver_grid: Grid2D,
    *,
    boundary_margin: int = 8,
) -> VelocityPair:
    """
    Forms the sharp and smoothed velocity models on the solver grid.

    `chi` and `alpha` are sampled onto the solver grid by nearest-neighbor interpolation, both
    are zeroed on the `boundary_margin` strip, then

    - `v = v_salt * chi + v_background * (1 - chi)`,
    - `v_bg = v_salt * alpha + v_background * (1 - alpha)`.

    Raises:
        DomainError: If a velocity is not positive.
        ShapeError: If `mask` and `alpha` live on different grids.
    """
    mask.grid.check_same(alpha.grid)
    if v_salt <= 0:
        raise DomainError("v_salt must be positive.")

    if isinstance(v_background, ScalarField2D):
        background = resample_nearest(v_background, solver_grid).values
    else:
        background = np.full(solver_grid.shape, float(v_background))
    if np.any(background <= 0):
        raise DomainError("v_background must be positive.")

    chi = zero_margin(resample_nearest(mask, solver_grid).values, boundary_margin)
    frac = zero_margin(resample_nearest(alpha, solver_grid).values, boundary_margin)
    v = v_salt * chi + background * (1.0 - chi)
    v_bg = v_salt * frac + background * (1.0 - frac)
    return VelocityPair.from_velocities(
        ScalarField2D(solver_grid, v),
        ScalarField2D(solver_grid, v_bg),
        alpha=ScalarField2D(solver_grid, frac, kind="fraction"),
        mask=ScalarField2D(solver_grid, chi, kind="mask"),
    )


class GeomodelSpec(FrozenModel):
    """Complete velocity-model generation settings."""

    grf_shape: tuple[int, int, int] = (64, 64, 64)
    """Shape `(nz, ny, nx)` of the 3D random field. The slices define the image grid."""

    matern: MaternParams = MaternParams()
    """Kernel of the random field, `ell` in cells."""

    mask: SaltMaskSpec = SaltMaskSpec()
    """Salt mask settings."""

    sigma_salt: float | None = Field(default=None, ge=0.0)
    """Interface smoothing scale in meters, 4 image pixels (along x) if not set."""

    v_background: PositiveFloat = 1500.0
    """Background velocity in m/s."""

    v_salt: PositiveFloat = 4500.0
    """Salt velocity in m/s."""

    def image_grid(self, solver_grid: Grid2D) -> Grid2D:
        """The image grid: the slice shape spanning the solver grid's physical extent."""
        _, ny, nx = self.grf_shape
        return Grid2D(nx=nx, ny=ny, lx=solver_grid.lx, ly=solver_grid.ly)

    def resolved_sigma_salt(self, solver_grid: Grid2D) -> float:
        """`sigma_salt` with the default applied."""
        if self.sigma_salt is not None:
            return self.sigma_salt

        return 4.0 * self.image_grid(solver_grid).dx

    def mollifier(self, solver_grid: Grid2D) -> "MollifierSpec":
        """The mollifier that reproduces this spec's smoothing on `solver_grid`."""
        return MollifierSpec(
            v_background=self.v_background,
            v_salt=self.v_salt,
            sigma_salt=self.resolved_sigma_salt(solver_grid),
            boundary_margin=self.mask.boundary_margin,
        )


class MollifierSpec(FrozenModel):
    """
    Smoothing operator that maps a sharp velocity model to its background.

    The salt fraction is recovered from `v` as `(v - v_background) / (v_salt - v_background)`,
    blurred with `gaussian_blur_fraction()` on the velocity's own grid, zeroed on the boundary
    margin and mapped back to a velocity.
    """

    v_background: PositiveFloat = 1500.0
    """Background velocity in m/s."""

    v_salt: PositiveFloat = 4500.0
    """Salt velocity in m/s."""

    sigma_salt: float = Field(default=0.0, ge=0.0)
    """Smoothing scale in meters, `0` is the identity."""

    boundary_margin: int = Field(default=8, ge=0)
    """Width of the strip where the background equals `v_background`."""

    @model_validator(mode="after")
    def _check_contrast(self) -> "MollifierSpec":
        if self.v_salt == self.v_background:
            raise ValueError("v_salt and v_background must differ.")

        return self

    def apply(self, v: ScalarField2D) -> ScalarField2D:
        """Returns the smoothed background of `v`."""
        if self.sigma_salt == 0:
            return v

        contrast = self.v_salt - self.v_background
        chi = ScalarField2D(v.grid, np.clip((v.values - self.v_background) / contrast, 0.0, 1.0))
        frac = zero_margin(gaussian_blur_fraction(chi, self.sigma_salt).values, self.boundary_margin)
        return ScalarField2D(v.grid, self.v_salt * frac + self.v_background * (1.0 - frac))


def generate_velocity_pair(spec: GeomodelSpec, solver_grid: Grid2D, seed: int) -> VelocityPair:
    """
    Runs the complete generation pipeline for one sample.

    The result is fully determined by `spec`, `solver_grid` and `seed`.
    """
    image_grid = spec.image_grid(solver_grid)
    volume = sample_grf_spectral(spec.grf_shape, spec.matern, seed)
    tau = quantile_threshold(volume, spec.mask.rho_salt)
    raw = extract_slice((volume > tau).astype(np.float64), spec.mask, image_grid, seed=seed)
    mask = clean_mask(raw, spec.mask)
    alpha = gaussian_blur_fraction(mask, spec.resolved_sigma_salt(solver_grid))
    return build_velocity_pair(
        mask,
        alpha,
        spec.v_background,
        spec.v_salt,
        solver_grid,
        boundary_margin=spec.mask.boundary_margin,
    )
