import numpy as np
import pytest
import torch
from pydantic import ValidationError

from helmsplit.errors import ConfigError, ShapeError
from helmsplit.fields import Grid2D
from helmsplit.geomodel import MollifierSpec
from helmsplit.models import (
    FNO,
    FnoConfig,
    HybridModel,
    TokenLayout,
    VitConfig,
    WindowTransformer,
    build_model,
    count_params,
    fno_forward,
    hybrid_forward,
    vit_forward,
)
from helmsplit.tasks import NormalizationStats
from helmsplit.verify import tiny_fno_config, tiny_hybrid, tiny_vit_config

from .data import synthetic_records


def identity_stats(in_channels: int) -> NormalizationStats:
    return NormalizationStats(
        input_mean=np.zeros(in_channels),
        input_std=np.ones(in_channels),
        output_mean=np.zeros(2),
        output_std=np.ones(2),
        provenance="",
    )


def test_effective_modes_are_clipped() -> None:
    cfg = FnoConfig(modes_x=64, modes_y=3)
    assert cfg.effective_modes((64, 64)) == (3, 32)
    assert cfg.effective_modes((4, 256)) == (2, 64)


def test_vit_config_needs_divisible_heads() -> None:
    with pytest.raises(ValidationError):
        VitConfig(embed_dim=10, n_heads=3)


@pytest.mark.parametrize(
    ("grid_shape", "patch", "window", "expected"),
    (
        ((8, 8), 2, 2, TokenLayout(rows=4, cols=4, window=2, shift=1, patch_size=2)),
        ((6, 6), 4, 8, TokenLayout(rows=2, cols=2, window=2, shift=0, patch_size=4)),
        ((10, 6), 2, 4, TokenLayout(rows=6, cols=3, window=3, shift=1, patch_size=2)),
    ),
)
def test_token_layout(grid_shape: tuple[int, int], patch: int, window: int, expected: TokenLayout) -> None:
    cfg = VitConfig(embed_dim=8, n_heads=2, patch_size=patch, window_size=window)
    layout = TokenLayout.create(cfg, grid_shape)
    assert layout == expected
    assert layout.field_shape[0] >= grid_shape[0] and layout.field_shape[1] >= grid_shape[1]


@pytest.mark.parametrize("grid_shape", ((8, 8), (10, 6), (16, 12)))
def test_closed_form_parameter_counts(grid_shape: tuple[int, int]) -> None:
    fno_cfg = tiny_fno_config()
    vit_cfg = tiny_vit_config()
    fno = build_model("fno", fno_cfg, 4, grid_shape)
    vit = build_model("vit", vit_cfg, 5, grid_shape)
    assert count_params(fno_cfg, in_channels=4, grid_shape=grid_shape) == count_params(fno)
    assert count_params(vit_cfg, in_channels=5, grid_shape=grid_shape) == count_params(vit)


def test_parameter_count_grows_with_depth() -> None:
    counts = [count_params(FnoConfig(n_layers=n, hidden_channels=8, modes_x=4, modes_y=4)) for n in (2, 4)]
    assert counts[0] < counts[1]
    counts = [count_params(VitConfig(depth=d, embed_dim=8, n_heads=2)) for d in (2, 4)]
    assert counts[0] < counts[1]


def test_build_model_is_seeded() -> None:
    a = build_model("fno", tiny_fno_config(), 4, (8, 8), seed=3)
    b = build_model("fno", tiny_fno_config(), 4, (8, 8), seed=3)
    c = build_model("fno", tiny_fno_config(), 4, (8, 8), seed=4)
    pairs = list(zip(a.parameters(), b.parameters(), strict=True))
    assert all(torch.equal(p, q) for p, q in pairs)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters(), strict=True))
    assert isinstance(a, FNO)

    with pytest.raises(ConfigError):
        build_model("vit", tiny_fno_config(), 4, (8, 8))


def test_fno_forward_shapes() -> None:
    fno = build_model("fno", tiny_fno_config(), 4, (8, 6)).double()
    x = torch.randn(3, 4, 8, 6, dtype=torch.float64)
    assert fno(x).shape == (3, 2, 8, 6)
    assert fno_forward(fno, x[0]).shape == (2, 8, 6)  # type: ignore[arg-type]
    with pytest.raises(ShapeError):
        fno(torch.randn(3, 5, 8, 6, dtype=torch.float64))
    with pytest.raises(ShapeError):
        fno(torch.randn(3, 4, 8, 8, dtype=torch.float64))


def test_transformer_forward_crops_padding() -> None:
    vit = build_model("vit", tiny_vit_config(), 5, (10, 6)).double()
    assert isinstance(vit, WindowTransformer)
    x = torch.randn(2, 5, 10, 6, dtype=torch.float64)
    assert vit(x).shape == (2, 2, 10, 6)
    assert vit_forward(vit, x[1]).shape == (2, 10, 6)
    assert vit.encode(x, depth=1).shape == (2, vit.layout.rows, vit.layout.cols, 8)


def test_normalization_is_part_of_the_forward_pass() -> None:
    fno = build_model("fno", tiny_fno_config(), 4, (8, 8)).double()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    raw = fno(x)
    stats = NormalizationStats(
        input_mean=np.array([1.0, -1.0, 0.5, 0.0]),
        input_std=np.array([2.0, 1.0, 4.0, 0.5]),
        output_mean=np.array([3.0, -2.0]),
        output_std=np.array([10.0, 0.1]),
        provenance="x",
    )
    mean, std = torch.as_tensor(stats.input_mean), torch.as_tensor(stats.input_std)
    shifted = x * std[:, None, None] + mean[:, None, None]
    fno.normalizer.load_stats(stats)
    out_mean, out_std = torch.as_tensor(stats.output_mean), torch.as_tensor(stats.output_std)
    expected = raw * out_std[:, None, None] + out_mean[:, None, None]
    assert torch.allclose(fno(shifted), expected, atol=1e-10)


def test_hybrid_validation() -> None:
    fno = build_model("fno", tiny_fno_config(), 4, (8, 8))
    vit = build_model("vit", tiny_vit_config(), 5, (8, 6))
    with pytest.raises(ConfigError):
        HybridModel(fno, vit, MollifierSpec())  # type: ignore[arg-type]

    sharp_vit = build_model("vit", tiny_vit_config(), 4, (8, 8))
    with pytest.raises(ConfigError):
        HybridModel(fno, sharp_vit, MollifierSpec())  # type: ignore[arg-type]


def test_hybrid_total_is_the_sum_of_its_branches() -> None:
    hybrid = tiny_hybrid()
    fno_input = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    delta_v = torch.randn(2, 8, 8, dtype=torch.float64)
    out = hybrid.branches(fno_input, delta_v)
    assert torch.equal(out.total, out.background + out.scattered)
    assert torch.equal(hybrid(fno_input, delta_v), out.total)
    assert torch.equal(out.background, hybrid.fno(fno_input))


def test_hybrid_prediction_needs_statistics() -> None:
    hybrid = tiny_hybrid()
    records = synthetic_records(2)
    with pytest.raises(ConfigError):
        hybrid.predict(records)

    hybrid.fno.normalizer.load_stats(identity_stats(4))
    hybrid.vit.normalizer.load_stats(identity_stats(5))
    predictions = hybrid.predict(records)
    assert predictions.shape == (2, 8, 8)
    assert np.iscomplexobj(predictions)

    single = hybrid_forward(hybrid, records[1].require("v"), records[1].require("s"))
    assert np.allclose(single.values, predictions[1], atol=1e-12)
    assert hybrid.parameter_count() == count_params(hybrid.fno) + count_params(hybrid.vit)

    other = synthetic_records(1, Grid2D(nx=6, ny=8, lx=50.0, ly=70.0))
    with pytest.raises(ShapeError):
        hybrid.prepare(other[0].require("v"), other[0].require("s"))
