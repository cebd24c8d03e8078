import numpy as np
import pytest
import torch

from helmsplit.errors import ConfigError, ShapeError
from helmsplit.layers import (
    ChannelNormalizer,
    PatchEmbed,
    SpectralConv2d,
    SwinBlock,
    WindowAttention,
    as_tensor,
    kept_mode_indices,
    pad_field,
    patch_embed,
    relative_position_index,
    shift_mask,
    spectral_conv2d,
    unpatch,
    window_attention,
    window_partition,
    window_reverse,
)
from helmsplit.tasks import NormalizationStats


def numpy_spectral_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    _, ny, nx = x.shape
    my, mx = w.shape[2:]
    iy = np.r_[0 : (my + 1) // 2, ny - my // 2 : ny]
    ix = np.r_[0 : (mx + 1) // 2, nx - mx // 2 : nx]
    coeffs = np.fft.fft2(x, norm="ortho")
    out = np.zeros((w.shape[1], ny, nx), dtype=complex)
    out[:, iy[:, None], ix[None, :]] = np.einsum("ixy,ioxy->oxy", coeffs[:, iy[:, None], ix[None, :]], w)
    return np.fft.ifft2(out, norm="ortho").real


def test_kept_mode_indices() -> None:
    assert kept_mode_indices(8, 3).tolist() == [0, 1, 7]
    assert kept_mode_indices(8, 4).tolist() == [0, 1, 6, 7]
    assert kept_mode_indices(5, 1).tolist() == [0]


def test_spectral_conv_matches_numpy() -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 8, 6))
    w = rng.normal(size=(3, 2, 3, 2)) + 1j * rng.normal(size=(3, 2, 3, 2))
    expected = numpy_spectral_conv(x, w)

    xt = torch.as_tensor(x)
    complex_weights = torch.as_tensor(w)
    real_weights = torch.view_as_real(complex_weights)
    assert torch.allclose(spectral_conv2d(xt, complex_weights), torch.as_tensor(expected), atol=1e-12)
    assert torch.allclose(spectral_conv2d(xt, real_weights), torch.as_tensor(expected), atol=1e-12)

    batched = spectral_conv2d(torch.stack((xt, 2 * xt)), complex_weights)
    assert batched.shape == (2, 2, 8, 6)
    assert torch.allclose(batched[1], 2 * torch.as_tensor(expected), atol=1e-12)


def test_spectral_conv_keeps_constants_constant() -> None:
    x = torch.full((1, 1, 8, 8), 3.0, dtype=torch.float64)
    w = torch.zeros(1, 1, 2, 2, dtype=torch.complex128)
    w[0, 0, 0, 0] = 2.0
    assert torch.allclose(spectral_conv2d(x, w), torch.full_like(x, 6.0))


def test_spectral_conv_validation() -> None:
    w = torch.zeros(2, 2, 2, 2, dtype=torch.complex128)
    with pytest.raises(ShapeError):
        spectral_conv2d(torch.zeros(1, 3, 8, 8, dtype=torch.float64), w)
    with pytest.raises(ShapeError):
        spectral_conv2d(torch.zeros(8, 8, dtype=torch.float64), w)
    with pytest.raises(ConfigError):
        spectral_conv2d(torch.zeros(1, 2, 3, 8, dtype=torch.float64), w)


def test_spectral_conv_layer() -> None:
    layer = SpectralConv2d(3, 5, 2, 4)
    assert layer.weight.shape == (3, 5, 2, 4, 2)
    assert layer(torch.zeros(2, 3, 8, 8)).shape == (2, 5, 8, 8)


def test_channel_normalizer() -> None:
    normalizer = ChannelNormalizer(2, 1)
    x = torch.arange(8.0).view(1, 2, 2, 2)
    assert not normalizer.is_fitted
    assert torch.equal(normalizer.normalize_input(x), x)

    stats = NormalizationStats(
        input_mean=np.array([1.0, 2.0]),
        input_std=np.array([2.0, 4.0]),
        output_mean=np.array([10.0]),
        output_std=np.array([3.0]),
        provenance="abc",
    )
    normalizer.load_stats(stats)
    assert normalizer.is_fitted
    assert normalizer.stats().provenance == "abc"
    normalized = normalizer.normalize_input(x)
    assert torch.allclose(normalized[0, 1], (x[0, 1] - 2.0) / 4.0)
    denormalized = normalizer.denormalize_output(torch.ones(1, 1, 2, 2))
    assert torch.allclose(denormalized, torch.full((1, 1, 2, 2), 13.0))
    assert np.array_equal(normalizer.stats().input_std, stats.input_std)
    assert "input_mean" in normalizer.state_dict()

    with pytest.raises(ShapeError):
        ChannelNormalizer(3, 1).load_stats(stats)


def test_pad_field() -> None:
    x = torch.arange(12.0).view(1, 1, 3, 4)
    assert pad_field(x, 3, 4) is x
    reflected = pad_field(x, 4, 5)
    assert reflected.shape == (1, 1, 4, 5)
    assert reflected[0, 0, 3, :4].tolist() == x[0, 0, 1].tolist()
    replicated = pad_field(torch.ones(1, 1, 1, 1), 3, 3)
    assert torch.equal(replicated, torch.ones(1, 1, 3, 3))
    with pytest.raises(ShapeError):
        pad_field(x, 2, 4)


def test_patch_embed_tokens() -> None:
    x = torch.arange(16.0).view(1, 1, 4, 4)
    weight = torch.ones(1, 1, 2, 2)
    tokens = patch_embed(x, weight, None, None, 2)
    assert tokens.shape == (1, 2, 2, 1)
    assert tokens[0, 0, 0, 0] == 0 + 1 + 4 + 5
    assert tokens[0, 1, 1, 0] == 10 + 11 + 14 + 15

    module = PatchEmbed(3, 8, 2, (3, 3))
    assert module(torch.zeros(2, 3, 5, 6)).shape == (2, 3, 3, 8)


def test_window_partition_roundtrip() -> None:
    x = torch.randn(2, 4, 6, 3)
    windows = window_partition(x, 2)
    assert windows.shape == (12, 4, 3)
    assert torch.equal(windows[0], x[0, :2, :2].reshape(4, 3))
    assert torch.equal(window_reverse(windows, 2, 4, 6), x)


def test_relative_position_index() -> None:
    index = relative_position_index(3)
    assert index.shape == (9, 9)
    assert int(index.min()) == 0 and int(index.max()) == 24
    assert torch.all(index.diagonal() == 12)


def test_shift_mask() -> None:
    mask = shift_mask(4, 4, 2, 1)
    assert mask.shape == (4, 4, 4)
    assert not mask[0].any()
    assert mask[3].any()
    assert torch.equal(mask, mask.transpose(1, 2))


def test_window_attention_weights() -> None:
    with pytest.raises(ConfigError):
        WindowAttention(6, 4, 2)

    attention = WindowAttention(8, 2, 2).double()
    windows = torch.randn(4, 4, 8, dtype=torch.float64)
    weights = attention.attention_weights(windows)
    assert weights.shape == (4, 2, 4, 4)
    assert torch.allclose(weights.sum(-1), torch.ones(4, 2, 4, dtype=torch.float64))

    mask = shift_mask(4, 4, 2, 1)
    masked = attention.attention_weights(windows, mask)
    assert torch.all(masked[3][:, mask[3]] == 0)


def test_unshifted_windows_are_independent() -> None:
    torch.manual_seed(0)
    attention = WindowAttention(4, 1, 2).double()
    x = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    y = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    x_changed = x.clone()
    x_changed[0, 0, 0] = y[0, 0, 0]
    a = window_attention(x, attention, 0)
    b = window_attention(x_changed, attention, 0)
    assert torch.allclose(a[0, 2:, 2:], b[0, 2:, 2:], rtol=0, atol=1e-14)
    assert not torch.equal(a[0, :2, :2], b[0, :2, :2])

    shifted = window_attention(x, attention, 1)
    assert shifted.shape == x.shape
    with pytest.raises(ShapeError):
        window_attention(torch.randn(1, 3, 4, 4, dtype=torch.float64), attention, 0)


def test_zero_queries_and_keys_average_the_values() -> None:
    torch.manual_seed(1)
    dim = 8
    attention = WindowAttention(dim, 2, 2).double()
    with torch.no_grad():
        attention.qkv.weight[: 2 * dim].zero_()
        attention.qkv.bias[: 2 * dim].zero_()
        attention.bias_table.zero_()

    x = torch.randn(1, 2, 2, dim, dtype=torch.float64)
    out = window_attention(x, attention, 0)
    values = torch.nn.functional.linear(
        x.view(4, dim), attention.qkv.weight[2 * dim :], attention.qkv.bias[2 * dim :]
    )
    expected = attention.proj(values.mean(dim=0))
    assert torch.allclose(out.reshape(4, dim), expected.expand(4, dim), rtol=0, atol=1e-12)


def test_unbiased_attention_is_permutation_equivariant() -> None:
    torch.manual_seed(2)
    dim = 8
    attention = WindowAttention(dim, 2, 2).double()
    with torch.no_grad():
        attention.bias_table.zero_()

    x = torch.randn(1, 2, 2, dim, dtype=torch.float64)
    order = torch.tensor([2, 0, 3, 1])
    permuted = x.view(4, dim)[order].view(1, 2, 2, dim)
    out = window_attention(x, attention, 0).reshape(4, dim)
    out_permuted = window_attention(permuted, attention, 0).reshape(4, dim)
    assert torch.allclose(out_permuted, out[order], rtol=0, atol=1e-12)


def test_swin_block_is_differentiable() -> None:
    block = SwinBlock(8, 2, 2, 1, 2.0)
    x = torch.randn(2, 4, 4, 8, requires_grad=True)
    out = block(x)
    assert out.shape == x.shape
    out.sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_unpatch_inverts_patching() -> None:
    field = torch.randn(2, 3, 4, 6)
    tokens = field.view(2, 3, 2, 2, 3, 2).permute(0, 2, 4, 1, 3, 5).reshape(2, 2, 3, 12)
    assert torch.equal(unpatch(tokens, 3, 2), field)


def test_as_tensor_follows_like() -> None:
    like = torch.zeros(1, dtype=torch.float64)
    out = as_tensor(np.arange(4, dtype=np.float32)[::2], like)
    assert out.dtype == torch.float64
    assert out.tolist() == [0.0, 2.0]
