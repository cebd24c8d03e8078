"""
Neural operators: the Fourier neural operator, the shifted-window transformer and their
hybrid composition.

Networks take real channel stacks `(B, C, ny, nx)` on a fixed grid shape and return the
predicted complex field as two real channels `(B, 2, ny, nx)`. Normalization is part of the
network (`ChannelNormalizer`), so inputs and outputs are in physical units.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal, NamedTuple, TypeAlias

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import Field, PositiveFloat, model_validator
from torch import Tensor, nn

from .dataset import DatasetRecord, planes_to_complex
from .errors import ConfigError, ShapeError
from .fields import ComplexField2D, Grid2D, ScalarField2D
from .geomodel import MollifierSpec
from .layers import ChannelNormalizer, PatchEmbed, SpectralConv2d, SwinBlock, as_tensor, pad_field, unpatch
from .tasks import TaskKind, coordinate_channels, source_stack
from .typing import ComplexArray, RealArray
from .utils import FrozenModel

logger = logging.getLogger(__name__)

GridShape: TypeAlias = tuple[int, int]
"""`(ny, nx)` grid shape of a network."""


class FnoConfig(FrozenModel):
    """Fourier neural operator architecture."""

    n_layers: int = Field(default=4, ge=1)
    """Number of spectral layers."""

    hidden_channels: int = Field(default=64, ge=1)
    """Width of the spectral layers."""

    modes_x: int = Field(default=64, ge=1)
    """Kept Fourier modes along x, clipped to `nx // 2`."""

    modes_y: int = Field(default=64, ge=1)
    """Kept Fourier modes along y, clipped to `ny // 2`."""

    lifting_channels: int = Field(default=128, ge=1)
    """Hidden width of the lifting MLP."""

    projection_channels: int = Field(default=128, ge=1)
    """Hidden width of the projection MLP."""

    out_channels: int = Field(default=2, ge=1)
    """Output channels (real and imaginary part)."""

    def effective_modes(self, grid_shape: GridShape) -> tuple[int, int]:
        """`(modes_y, modes_x)` clipped to the Nyquist limit of the grid."""
        ny, nx = grid_shape
        my, mx = min(self.modes_y, ny // 2), min(self.modes_x, nx // 2)
        if (my, mx) != (self.modes_y, self.modes_x):
            requested = (self.modes_y, self.modes_x)
            logger.info("FNO modes clipped from %s to %s on a %dx%d grid.", requested, (my, mx), ny, nx)

        return my, mx


class VitConfig(FrozenModel):
    """Shifted-window transformer architecture."""

    depth: int = Field(default=4, ge=1)
    """Number of transformer blocks."""

    embed_dim: int = Field(default=90, ge=1)
    """Token embedding dimension."""

    patch_size: int = Field(default=4, ge=1)
    """Patch edge length in grid nodes."""

    window_size: int = Field(default=8, ge=1)
    """Attention window edge length in tokens."""

    n_heads: int = Field(default=6, ge=1)
    """Attention heads, must divide `embed_dim`."""

    mlp_ratio: PositiveFloat = 4.0
    """Hidden width of the block MLPs relative to `embed_dim`."""

    out_channels: int = Field(default=2, ge=1)
    """Output channels (real and imaginary part)."""

    @model_validator(mode="after")
    def _check_heads(self) -> "VitConfig":
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"n_heads ({self.n_heads}) must divide embed_dim ({self.embed_dim}).")

        return self


@dataclass(frozen=True, slots=True)
class TokenLayout:
    """Token grid of a transformer on a given field shape."""

    rows: int
    """Token rows after padding to a multiple of the window."""

    cols: int
    """Token columns after padding to a multiple of the window."""

    window: int
    """Effective window, `min(window_size, token rows, token cols)`."""

    shift: int
    """Shift of the odd blocks, `0` if one window covers the grid."""

    patch_size: int

    @classmethod
    def create(cls, cfg: VitConfig, grid_shape: GridShape) -> "TokenLayout":
        ny, nx = grid_shape
        p = cfg.patch_size
        rows, cols = math.ceil(ny / p), math.ceil(nx / p)
        window = min(cfg.window_size, rows, cols)
        rows, cols = math.ceil(rows / window) * window, math.ceil(cols / window) * window
        shift = window // 2 if (rows > window or cols > window) else 0
        return cls(rows=rows, cols=cols, window=window, shift=shift, patch_size=p)

    @property
    def field_shape(self) -> GridShape:
        """Shape of the padded input field."""
        return (self.rows * self.patch_size, self.cols * self.patch_size)


def _check_input(x: Tensor, in_channels: int, grid_shape: GridShape) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != (in_channels, *grid_shape):
        expected = (in_channels, *grid_shape)
        raise ShapeError(f"Expected input (B, *{expected}), got {tuple(x.shape)}.")


class FNO(nn.Module):
    """
    Fourier neural operator: pointwise lifting MLP, `n_layers` spectral layers
    `h ← GELU(K·h + W·h + b)` and a pointwise projection MLP.
    """

    kind: Literal["fno"] = "fno"

    def __init__(self, cfg: FnoConfig, in_channels: int, grid_shape: GridShape) -> None:
        super().__init__()
        self.config = cfg
        self.in_channels = in_channels
        self.grid_shape = grid_shape
        self.task: TaskKind | None = None

        my, mx = cfg.effective_modes(grid_shape)
        width = cfg.hidden_channels
        self.normalizer = ChannelNormalizer(in_channels, cfg.out_channels)
        self.lifting = nn.Sequential(
            nn.Conv2d(in_channels, cfg.lifting_channels, 1),
            nn.GELU(),
            nn.Conv2d(cfg.lifting_channels, width, 1),
        )
        self.spectral = nn.ModuleList(SpectralConv2d(width, width, my, mx) for _ in range(cfg.n_layers))
        self.bypass = nn.ModuleList(nn.Conv2d(width, width, 1) for _ in range(cfg.n_layers))
        self.projection = nn.Sequential(
            nn.Conv2d(width, cfg.projection_channels, 1),
            nn.GELU(),
            nn.Conv2d(cfg.projection_channels, cfg.out_channels, 1),
        )

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.in_channels, self.grid_shape)
        h = self.lifting(self.normalizer.normalize_input(x))
        for spectral, bypass in zip(self.spectral, self.bypass, strict=True):
            h = F.gelu(spectral(h) + bypass(h))

        return self.normalizer.denormalize_output(self.projection(h))


class WindowTransformer(nn.Module):
    """
    Single-resolution shifted-window transformer: patch embedding, `depth` blocks with window
    shifts alternating between `0` and half a window, and a linear un-patching head.
    """

    kind: Literal["vit"] = "vit"

    def __init__(self, cfg: VitConfig, in_channels: int, grid_shape: GridShape) -> None:
        super().__init__()
        self.config = cfg
        self.in_channels = in_channels
        self.grid_shape = grid_shape
        self.task: TaskKind | None = None

        self.layout = layout = TokenLayout.create(cfg, grid_shape)
        dim = cfg.embed_dim
        self.normalizer = ChannelNormalizer(in_channels, cfg.out_channels)
        self.embed = PatchEmbed(in_channels, dim, cfg.patch_size, (layout.rows, layout.cols))
        self.blocks = nn.ModuleList(
            SwinBlock(dim, cfg.n_heads, layout.window, layout.shift if i % 2 == 1 else 0, cfg.mlp_ratio)
            for i in range(cfg.depth)
        )
        self.head_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, cfg.out_channels * cfg.patch_size**2)

    def encode(self, x: Tensor, depth: int | None = None) -> Tensor:
        """
        Token grid `(B, rows, cols, D)` after the first `depth` blocks (all blocks by default).
        """
        _check_input(x, self.in_channels, self.grid_shape)
        tokens = self.embed(pad_field(self.normalizer.normalize_input(x), *self.layout.field_shape))
        for block in self.blocks[: len(self.blocks) if depth is None else depth]:
            tokens = block(tokens)

        return tokens

    def forward(self, x: Tensor) -> Tensor:
        ny, nx = self.grid_shape
        tokens = self.head(self.head_norm(self.encode(x)))
        y = unpatch(tokens, self.config.out_channels, self.config.patch_size)
        return self.normalizer.denormalize_output(y[..., :ny, :nx])


Network: TypeAlias = FNO | WindowTransformer
"""A standalone network."""


def _forward(model: Network, input_stack: Tensor) -> Tensor:
    unbatched = input_stack.dim() == 3
    y = model(input_stack.unsqueeze(0) if unbatched else input_stack)
    return y.squeeze(0) if unbatched else y


def fno_forward(model: FNO, input_stack: Tensor) -> Tensor:
    """
    Evaluates the FNO on a `(C, ny, nx)` or `(B, C, ny, nx)` input stack.

    Raises:
        ShapeError: If the input does not match the network.
    """
    return _forward(model, input_stack)


def vit_forward(model: WindowTransformer, input_stack: Tensor) -> Tensor:
    """
    Evaluates the transformer on a `(C, ny, nx)` or `(B, C, ny, nx)` input stack.

    Raises:
        ShapeError: If the input does not match the network.
    """
    return _forward(model, input_stack)


def build_model(
    kind: Literal["fno", "vit"],
    cfg: FnoConfig | VitConfig,
    in_channels: int,
    grid_shape: GridShape,
    *,
    seed: int = 0,
) -> Network:
    """
    Creates a freshly initialized network. Initialization only depends on the arguments.

    Raises:
        ConfigError: If `cfg` does not match `kind`.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if kind == "fno" and isinstance(cfg, FnoConfig):
            return FNO(cfg, in_channels, grid_shape)
        if kind == "vit" and isinstance(cfg, VitConfig):
            return WindowTransformer(cfg, in_channels, grid_shape)

    raise ConfigError(f"Configuration {type(cfg).__name__} does not describe a {kind} model.")


def fno_layer_param_count(cfg: FnoConfig, grid_shape: GridShape) -> int:
    """Trainable scalars of one spectral layer: spectral weights, bypass weights and bias."""
    my, mx = cfg.effective_modes(grid_shape)
    c = cfg.hidden_channels
    return 2 * c * c * my * mx + c * c + c


def vit_block_param_count(cfg: VitConfig, grid_shape: GridShape) -> int:
    """Trainable scalars of one transformer block."""
    d = cfg.embed_dim
    hidden = int(d * cfg.mlp_ratio)
    window = TokenLayout.create(cfg, grid_shape).window
    norms = 4 * d
    attention = (3 * d * d + 3 * d) + (2 * window - 1) ** 2 * cfg.n_heads + (d * d + d)
    mlp = (d * hidden + hidden) + (hidden * d + d)
    return norms + attention + mlp


def count_params(
    model: nn.Module | FnoConfig | VitConfig,
    *,
    in_channels: int = 4,
    grid_shape: GridShape = (64, 64),
) -> int:
    """
    Exact number of trainable scalars of a network or of the network a configuration describes.

    Arguments:
        model: A module, or a configuration to count in closed form.
        in_channels: Input channels of the configured network.
        grid_shape: Grid shape of the configured network.
    """
    if isinstance(model, nn.Module):
        return sum(p.numel() for p in model.parameters() if p.requires_grad)

    if isinstance(model, FnoConfig):
        lift, proj = model.lifting_channels, model.projection_channels
        c, out = model.hidden_channels, model.out_channels
        lifting = (in_channels * lift + lift) + (lift * c + c)
        projection = (c * proj + proj) + (proj * out + out)
        return lifting + model.n_layers * fno_layer_param_count(model, grid_shape) + projection

    layout = TokenLayout.create(model, grid_shape)
    d, p, out = model.embed_dim, model.patch_size, model.out_channels
    embed = in_channels * d * p * p + d + d * layout.rows * layout.cols
    head = 2 * d + d * out * p * p + out * p * p
    return embed + model.depth * vit_block_param_count(model, grid_shape) + head


class HybridOutput(NamedTuple):
    """Branch outputs of the hybrid model, each `(B, 2, ny, nx)`."""

    background: Tensor
    """FNO prediction of the background field."""

    scattered: Tensor
    """Transformer prediction of the scattered field."""

    total: Tensor
    """`background + scattered`."""


class HybridModel(nn.Module):
    """
    Composition of an FNO trained on the smooth task and a transformer trained on the residual
    task: `p̂ = F_bg(s, v_bg) + F_sc(F_bg(s, v_bg), v - v_bg)` with `v_bg` the mollified `v`.
    """

    coordinates: Tensor

    def __init__(self, fno: FNO, vit: WindowTransformer, mollifier: MollifierSpec) -> None:
        """
        Raises:
            ConfigError: If the networks have incompatible grids or channel stacks.
        """
        super().__init__()
        if fno.grid_shape != vit.grid_shape:
            raise ConfigError(f"FNO grid {fno.grid_shape} differs from transformer grid {vit.grid_shape}.")
        if fno.in_channels != 4 or vit.in_channels != 5:
            raise ConfigError("Hybrid needs an FNO with 4 and a transformer with 5 input channels.")
        if fno.config.out_channels != 2 or vit.config.out_channels != 2:
            raise ConfigError("Hybrid branches must predict 2 channels.")

        self.fno = fno
        self.vit = vit
        self.mollifier = mollifier
        ny, nx = fno.grid_shape
        coords = coordinate_channels(Grid2D(nx=nx, ny=ny, lx=1.0, ly=1.0))
        self.register_buffer("coordinates", torch.as_tensor(coords, dtype=torch.get_default_dtype()))

    @property
    def grid_shape(self) -> GridShape:
        return self.fno.grid_shape

    def branches(self, fno_input: Tensor, delta_v: Tensor) -> HybridOutput:
        """
        Arguments:
            fno_input: Smooth-task stack `(B, 4, ny, nx)` built from the mollified velocity.
            delta_v: Velocity contrast `(B, ny, nx)`.
        """
        background = self.fno(fno_input)
        coords = self.coordinates.to(background.dtype).expand(len(background), -1, -1, -1)
        scattered = self.vit(torch.cat((background, delta_v.unsqueeze(1), coords), dim=1))
        return HybridOutput(background=background, scattered=scattered, total=background + scattered)

    def forward(self, fno_input: Tensor, delta_v: Tensor) -> Tensor:
        return self.branches(fno_input, delta_v).total

    def prepare(self, v: ScalarField2D, s: ComplexField2D) -> tuple[RealArray, RealArray]:
        """
        Mollifies `v` and builds the branch inputs.

        Returns:
            The FNO input stack `(4, ny, nx)` and `δv = v - v_bg` `(ny, nx)`.
        """
        v.grid.check_same(s.grid)
        if v.grid.shape != self.grid_shape:
            raise ShapeError(f"Velocity grid {v.grid.shape} does not match model grid {self.grid_shape}.")

        v_bg = self.mollifier.apply(v)
        return source_stack(v_bg.values, s.values, v.grid), v.values - v_bg.values

    def require_stats(self) -> None:
        """
        Raises:
            ConfigError: If a branch has no normalization statistics.
        """
        for name, net in (("FNO", self.fno), ("transformer", self.vit)):
            if not net.normalizer.is_fitted:
                raise ConfigError(f"The {name} branch has no normalization statistics.")

    def predict(self, records: Sequence[DatasetRecord]) -> ComplexArray:
        self.require_stats()
        prepared = [self.prepare(r.require("v"), r.require("s")) for r in records]
        like = next(self.fno.parameters())
        fno_input = as_tensor(np.stack([p[0] for p in prepared]), like)
        delta_v = as_tensor(np.stack([p[1] for p in prepared]), like)
        self.eval()
        with torch.no_grad():
            total = self(fno_input, delta_v)

        return planes_to_complex(total.double().cpu().numpy())

    def parameter_count(self) -> int:
        return count_params(self.fno) + count_params(self.vit)


def hybrid_forward(model: HybridModel, v: ScalarField2D, s: ComplexField2D) -> ComplexField2D:
    """
    Predicts the total field for a sharp velocity model and a source.

    Raises:
        ConfigError: If a branch has no normalization statistics.
        ShapeError: If the fields do not match the model grid.
    """
    model.require_stats()
    fno_input, delta_v = model.prepare(v, s)
    like = next(model.fno.parameters())
    model.eval()
    with torch.no_grad():
        total = model(as_tensor(fno_input[None], like), as_tensor(delta_v[None], like))

    return ComplexField2D(v.grid, planes_to_complex(total.double().cpu().numpy())[0])
