"""
Differentiable building blocks of the neural operators.

Tensors follow the PyTorch convention: fields are `(batch, channels, ny, nx)`, token grids are
`(batch, rows, cols, embed_dim)`.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, ShapeError
from .tasks import NormalizationStats


def kept_mode_indices(n: int, modes: int, device: torch.device | None = None) -> Tensor:
    """
    DFT indices of the `modes` lowest `|k|` frequencies of an `n`-point axis: `⌈modes/2⌉`
    non-negative followed by `⌊modes/2⌋` negative ones.
    """
    positive = torch.arange((modes + 1) // 2, device=device)
    negative = torch.arange(n - modes // 2, n, device=device)
    return torch.cat((positive, negative))


def spectral_conv2d(x: Tensor, weights: Tensor) -> Tensor:
    """
    Spectral convolution: DFT, per-mode complex channel mixing on the kept low-frequency block,
    zero padding, inverse DFT, real part.

    Arguments:
        x: Real input, `(B, C_in, ny, nx)` or `(C_in, ny, nx)`.
        weights: Complex `(C_in, C_out, m_y, m_x)` weights, or their real view with a trailing
            axis of length 2.

    Returns:
        Real output with `C_out` channels, batched like the input.

    Raises:
        ConfigError: If a mode count exceeds `n // 2` on its axis.
        ShapeError: If the input does not match the weights.
    """
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"Expected a (B, C, ny, nx) input, got shape {tuple(x.shape)}.")

    w = weights if weights.is_complex() else torch.view_as_complex(weights)
    c_in, c_out, my, mx = w.shape
    batch, channels, ny, nx = x.shape
    if channels != c_in:
        raise ShapeError(f"Input has {channels} channels, the weights expect {c_in}.")
    if not (1 <= my <= ny // 2 and 1 <= mx <= nx // 2):
        raise ConfigError(f"Modes ({my}, {mx}) exceed the Nyquist limit of a {ny}x{nx} grid.")

    iy = kept_mode_indices(ny, my, x.device)[:, None]
    ix = kept_mode_indices(nx, mx, x.device)[None, :]
    coeffs = torch.fft.fft2(x, norm="ortho")
    mixed = torch.einsum("bixy,ioxy->boxy", coeffs[:, :, iy, ix], w)
    out = torch.zeros(batch, c_out, ny, nx, dtype=coeffs.dtype, device=x.device)
    out[:, :, iy, ix] = mixed
    y = torch.fft.ifft2(out, norm="ortho").real
    return y.squeeze(0) if unbatched else y


class SpectralConv2d(nn.Module):
    """Spectral convolution layer with learned weights on `(modes_y, modes_x)` kept modes."""

    def __init__(self, in_channels: int, out_channels: int, modes_y: int, modes_x: int) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.modes_y = modes_y
        self.modes_x = modes_x

        scale = 1 / (in_channels * out_channels)
        self.weight = nn.Parameter(scale * torch.rand(in_channels, out_channels, modes_y, modes_x, 2))

    def forward(self, x: Tensor) -> Tensor:
        return spectral_conv2d(x, self.weight)


class ChannelNormalizer(nn.Module):
    """
    Per-channel affine normalization of inputs and de-normalization of outputs.

    The identity until `load_stats()` is called. The statistics are buffers, so they travel
    with the model's state and checkpoint.
    """

    input_mean: Tensor
    input_std: Tensor
    output_mean: Tensor
    output_std: Tensor
    fitted: Tensor

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.register_buffer("input_mean", torch.zeros(in_channels))
        self.register_buffer("input_std", torch.ones(in_channels))
        self.register_buffer("output_mean", torch.zeros(out_channels))
        self.register_buffer("output_std", torch.ones(out_channels))
        self.register_buffer("fitted", torch.tensor(False))
        self.provenance = ""

    @property
    def is_fitted(self) -> bool:
        """Whether statistics have been loaded."""
        return bool(self.fitted.item())

    def load_stats(self, stats: NormalizationStats) -> None:
        """
        Raises:
            ShapeError: If the statistics have the wrong number of channels.
        """
        if len(stats.input_mean) != len(self.input_mean) or len(stats.output_mean) != len(self.output_mean):
            raise ShapeError("Normalization statistics do not match the model's channels.")

        with torch.no_grad():
            for name in ("input_mean", "input_std", "output_mean", "output_std"):
                buffer = getattr(self, name)
                buffer.copy_(torch.as_tensor(getattr(stats, name), dtype=buffer.dtype))
            self.fitted.fill_(True)
        self.provenance = stats.provenance

    def stats(self) -> NormalizationStats:
        """The loaded statistics as arrays."""
        return NormalizationStats(
            input_mean=self.input_mean.detach().cpu().double().numpy(),
            input_std=self.input_std.detach().cpu().double().numpy(),
            output_mean=self.output_mean.detach().cpu().double().numpy(),
            output_std=self.output_std.detach().cpu().double().numpy(),
            provenance=self.provenance,
        )

    def normalize_input(self, x: Tensor) -> Tensor:
        return (x - self.input_mean[:, None, None]) / self.input_std[:, None, None]

    def denormalize_output(self, y: Tensor) -> Tensor:
        return y * self.output_std[:, None, None] + self.output_mean[:, None, None]


def pad_field(x: Tensor, ny: int, nx: int) -> Tensor:
    """
    Pads a `(B, C, h, w)` field at the bottom and right to `(ny, nx)`.

    Reflect padding is used when the field is large enough, replicate padding otherwise.
    """
    pad_y, pad_x = ny - x.shape[-2], nx - x.shape[-1]
    if pad_y < 0 or pad_x < 0:
        raise ShapeError(f"Cannot pad a {tuple(x.shape[-2:])} field to {(ny, nx)}.")
    if pad_y == 0 and pad_x == 0:
        return x

    mode = "reflect" if pad_y < x.shape[-2] and pad_x < x.shape[-1] else "replicate"
    return F.pad(x, (0, pad_x, 0, pad_y), mode=mode)


def patch_embed(
    x: Tensor, weight: Tensor, bias: Tensor | None, position: Tensor | None, patch_size: int
) -> Tensor:
    """
    Maps non-overlapping `patch_size²` patches to tokens.

    Arguments:
        x: Field `(B, C, ny, nx)`, reflect-padded to a multiple of `patch_size` if needed.
        weight: Patch projection `(D, C, patch_size, patch_size)`.
        bias: Optional projection bias `(D,)`.
        position: Optional additive positional embedding `(1, D, rows, cols)`.
        patch_size: Patch edge length.

    Returns:
        Token grid `(B, rows, cols, D)`.
    """
    rows = math.ceil(x.shape[-2] / patch_size)
    cols = math.ceil(x.shape[-1] / patch_size)
    x = pad_field(x, rows * patch_size, cols * patch_size)
    tokens = F.conv2d(x, weight, bias, stride=patch_size)
    if position is not None:
        tokens = tokens + position

    return tokens.permute(0, 2, 3, 1)


class PatchEmbed(nn.Module):
    """Patch projection with a learned positional embedding per token."""

    def __init__(
        self, in_channels: int, embed_dim: int, patch_size: int, token_shape: tuple[int, int]
    ) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.position = nn.Parameter(torch.zeros(1, embed_dim, *token_shape))
        nn.init.trunc_normal_(self.position, std=0.02)

    def forward(self, x: Tensor) -> Tensor:
        return patch_embed(x, self.proj.weight, self.proj.bias, self.position, self.patch_size)


def window_partition(x: Tensor, window: int) -> Tensor:
    """`(B, H, W, D)` token grid to `(B * n_windows, window², D)` windows, row-major."""
    b, h, w, d = x.shape
    x = x.view(b, h // window, window, w // window, window, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, d)


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of `window_partition()`."""
    d = windows.shape[-1]
    x = windows.view(-1, h // window, w // window, window, window, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, d)


def relative_position_index(window: int) -> Tensor:
    """`(window², window²)` index into a `(2·window - 1)²` relative-offset table."""
    axis = torch.arange(window)
    coords = torch.stack(torch.meshgrid(axis, axis, indexing="ij")).flatten(1)
    offsets = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
    return offsets[..., 0] * (2 * window - 1) + offsets[..., 1]


def shift_mask(h: int, w: int, window: int, shift: int, device: torch.device | None = None) -> Tensor:
    """
    Boolean `(n_windows, window², window²)` mask, `True` where two tokens of a window of the
    cyclically shifted grid were not neighbors before the shift.
    """
    region = torch.zeros(1, h, w, 1, device=device)
    label = 0
    for ys in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for xs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            region[:, ys, xs, :] = label
            label += 1

    ids = window_partition(region, window).squeeze(-1)
    return ids[:, :, None] != ids[:, None, :]


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows with a learned relative-position bias."""

    position_index: Tensor

    def __init__(self, dim: int, n_heads: int, window: int) -> None:
        """
        Raises:
            ConfigError: If `dim` is not divisible by `n_heads`.
        """
        super().__init__()
        if n_heads < 1 or dim % n_heads != 0:
            raise ConfigError(f"Embedding dimension {dim} is not divisible by {n_heads} heads.")

        self.dim = dim
        self.n_heads = n_heads
        self.window = window
        self.scale = (dim // n_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, n_heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("position_index", relative_position_index(window), persistent=False)

    def _split(self, windows: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        bw, n, _ = windows.shape
        qkv = self.qkv(windows).view(bw, n, 3, self.n_heads, self.dim // self.n_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        return q, k, v

    def _weights(self, q: Tensor, k: Tensor, mask: Tensor | None) -> Tensor:
        n = q.shape[-2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self.position_index.view(-1)].view(n, n, -1).permute(2, 0, 1)
        logits = logits + bias.unsqueeze(0)
        if mask is not None:
            n_windows = mask.shape[0]
            logits = logits.view(-1, n_windows, self.n_heads, n, n)
            logits = logits.masked_fill(mask[None, :, None], float("-inf")).view(-1, self.n_heads, n, n)

        return logits.softmax(dim=-1)

    def attention_weights(self, windows: Tensor, mask: Tensor | None = None) -> Tensor:
        """Softmax attention weights `(B * n_windows, heads, window², window²)`."""
        q, k, _ = self._split(windows)
        return self._weights(q, k, mask)

    def forward(self, windows: Tensor, mask: Tensor | None = None) -> Tensor:
        q, k, v = self._split(windows)
        out = self._weights(q, k, mask) @ v
        return self.proj(out.transpose(1, 2).reshape(windows.shape))


def window_attention(x: Tensor, attention: WindowAttention, shift: int) -> Tensor:
    """
    Shifted-window attention over a token grid.

    Cyclically shifts the grid by `(-shift, -shift)`, attends inside every window (masking
    pairs that wrapped around), and reverses the shift.

    Raises:
        ShapeError: If the token grid is not a multiple of the window.
    """
    _, h, w, _ = x.shape
    window = attention.window
    if h % window != 0 or w % window != 0:
        raise ShapeError(f"Token grid {(h, w)} is not a multiple of the window size {window}.")

    mask = None
    if shift > 0:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        mask = shift_mask(h, w, window, shift, x.device)

    x = window_reverse(attention(window_partition(x, window), mask), window, h, w)
    if shift > 0:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))

    return x


class SwinBlock(nn.Module):
    """Pre-norm transformer block with (shifted) window attention and an MLP."""

    def __init__(self, dim: int, n_heads: int, window: int, shift: int, mlp_ratio: float) -> None:
        super().__init__()
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attention = WindowAttention(dim, n_heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + window_attention(self.norm1(x), self.attention, self.shift)
        return x + self.mlp(self.norm2(x))


def unpatch(tokens: Tensor, channels: int, patch_size: int) -> Tensor:
    """`(B, rows, cols, channels·p²)` head outputs to a `(B, channels, rows·p, cols·p)` field."""
    b, rows, cols, _ = tokens.shape
    x = tokens.view(b, rows, cols, channels, patch_size, patch_size)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, rows * patch_size, cols * patch_size)


def as_tensor(array: np.ndarray, like: Tensor) -> Tensor:
    """Converts a numpy array to a tensor with the dtype and device of `like`."""
    return torch.as_tensor(np.ascontiguousarray(array), dtype=like.dtype, device=like.device)
