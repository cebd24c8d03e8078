"""
Versioned binary model checkpoints.

Layout (all little-endian):

- magic `b"HSCK"`, `u32` version,
- `u8` network kind (0 FNO, 1 transformer), `u8` task (0 none, 1 smooth, 2 residual,
  3 sharp), `u8` parameter dtype (0 float32, 1 float64), `u8` reserved,
- `u32` input channels, `u32` ny, `u32` nx,
- the configuration fields in declaration order (`u32` integers, `f64` floats),
- normalization statistics: `u8` fitted flag, `u32` input and `u32` output channel counts,
  input mean and std, output mean and std as `f64`, `u32` provenance length and the
  provenance as ASCII,
- `u32` tensor count, then every parameter in declaration order: `u32` rank, `u32` per
  dimension, the values as `f64`.
"""

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from .errors import CheckpointFormatError
from .models import FNO, FnoConfig, Network, VitConfig, build_model
from .tasks import NormalizationStats, TaskKind

MAGIC = b"HSCK"
VERSION = 1

_KINDS = ("fno", "vit")
_TASKS: tuple[TaskKind | None, ...] = (None, TaskKind.SMOOTH, TaskKind.RESIDUAL, TaskKind.SHARP)
_DTYPES = (torch.float32, torch.float64)

_PREFIX = struct.Struct("<4sIBBBBIII")
_FNO_FIELDS = (
    "n_layers",
    "hidden_channels",
    "modes_x",
    "modes_y",
    "lifting_channels",
    "projection_channels",
    "out_channels",
)
_VIT_FIELDS = ("depth", "embed_dim", "patch_size", "window_size", "n_heads", "out_channels")


def _write(f: BinaryIO, fmt: str, *values: int | float) -> None:
    f.write(struct.pack("<" + fmt, *values))


def _read(f: BinaryIO, fmt: str) -> tuple[int | float, ...]:
    size = struct.calcsize("<" + fmt)
    raw = f.read(size)
    if len(raw) < size:
        raise CheckpointFormatError("Truncated checkpoint.")

    return struct.unpack("<" + fmt, raw)


def _read_floats(f: BinaryIO, count: int) -> np.ndarray:
    raw = f.read(8 * count)
    if len(raw) < 8 * count:
        raise CheckpointFormatError("Truncated checkpoint.")

    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def dumps_checkpoint(model: Network) -> bytes:
    """Serializes a network."""
    f = io.BytesIO()
    dtype = next(model.parameters()).dtype
    f.write(
        _PREFIX.pack(
            MAGIC,
            VERSION,
            _KINDS.index(model.kind),
            _TASKS.index(model.task),
            _DTYPES.index(dtype),
            0,
            model.in_channels,
            *model.grid_shape,
        )
    )
    if isinstance(model, FNO):
        _write(f, "7I", *(getattr(model.config, name) for name in _FNO_FIELDS))
    else:
        _write(f, "6Id", *(getattr(model.config, name) for name in _VIT_FIELDS), model.config.mlp_ratio)

    normalizer = model.normalizer
    stats = normalizer.stats()
    provenance = stats.provenance.encode("ascii")
    _write(f, "BII", normalizer.is_fitted, len(stats.input_mean), len(stats.output_mean))
    for values in (stats.input_mean, stats.input_std, stats.output_mean, stats.output_std):
        f.write(np.asarray(values, dtype="<f8").tobytes())
    _write(f, "I", len(provenance))
    f.write(provenance)

    params = list(model.parameters())
    _write(f, "I", len(params))
    for p in params:
        _write(f, f"I{p.dim()}I", p.dim(), *p.shape)
        f.write(p.detach().cpu().numpy().astype("<f8").tobytes())

    return f.getvalue()


def loads_checkpoint(data: bytes) -> Network:
    """
    Restores a network serialized by `dumps_checkpoint()`.

    Raises:
        CheckpointFormatError: If the checkpoint is malformed or does not match its configuration.
    """
    f = io.BytesIO(data)
    prefix = f.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CheckpointFormatError("Truncated checkpoint.")

    magic, version, kind, task, dtype, _, in_channels, ny, nx = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointFormatError(f"Not a checkpoint (magic {magic!r}).")
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version}.")
    if kind >= len(_KINDS) or task >= len(_TASKS) or dtype >= len(_DTYPES):
        raise CheckpointFormatError("Invalid checkpoint header.")

    cfg: FnoConfig | VitConfig
    if _KINDS[kind] == "fno":
        cfg = FnoConfig(**dict(zip(_FNO_FIELDS, _read(f, "7I"), strict=True)))
    else:
        *ints, mlp_ratio = _read(f, "6Id")
        cfg = VitConfig(**dict(zip(_VIT_FIELDS, ints, strict=True)), mlp_ratio=mlp_ratio)

    model = build_model(_KINDS[kind], cfg, int(in_channels), (int(ny), int(nx)))  # type: ignore[arg-type]
    model = model.to(_DTYPES[dtype])
    model.task = _TASKS[task]

    fitted, n_in, n_out = (int(v) for v in _read(f, "BII"))
    moments = [_read_floats(f, n) for n in (n_in, n_in, n_out, n_out)]
    (length,) = _read(f, "I")
    provenance = f.read(int(length)).decode("ascii")
    if fitted:
        model.normalizer.load_stats(NormalizationStats(*moments, provenance=provenance))

    params = list(model.parameters())
    (count,) = _read(f, "I")
    if count != len(params):
        raise CheckpointFormatError(f"Checkpoint holds {count} tensors, the model has {len(params)}.")

    with torch.no_grad():
        for p in params:
            (rank,) = _read(f, "I")
            shape = tuple(int(d) for d in _read(f, f"{rank}I"))
            if shape != tuple(p.shape):
                raise CheckpointFormatError(f"Tensor shape {shape} does not match {tuple(p.shape)}.")
            p.copy_(torch.from_numpy(_read_floats(f, int(np.prod(shape, dtype=np.int64))).reshape(shape)))

    return model


def save_checkpoint(model: Network, path: Path) -> None:
    """Writes the network to `path`."""
    path.write_bytes(dumps_checkpoint(model))


def load_checkpoint(path: Path) -> Network:
    """
    Reads a network from `path`.

    Raises:
        CheckpointFormatError: If the checkpoint is malformed.
    """
    return loads_checkpoint(path.read_bytes())
