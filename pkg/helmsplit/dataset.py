"""
Dataset records and the `SCAT` binary container.

Container layout (all little-endian):

- header: magic `b"SCAT"`, `u32` version, `u32` nx, `u32` ny, `u64` record count,
  `f64` frequency in Hz, `f64` lx, `f64` ly, `u32` metadata length, then the metadata as
  UTF-8 JSON text. The metadata holds the list of stored fields and the generation settings.
- records of fixed size: `u64` sample id, `u64` seed, then one `f64` plane of `ny * nx`
  values (row-major) per real field and two planes (real, imaginary) per complex field, in
  `FIELD_NAMES` order restricted to the stored fields.
"""

import json
import logging
import multiprocessing
import struct
from collections.abc import Iterable, Iterator, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import TracebackType
from typing import Any, BinaryIO, Literal, overload

import numpy as np

from .errors import DatasetFormatError, DomainError, HelmsplitError, MissingFieldError, ShapeError
from .fields import ComplexField2D, Frequency, Grid2D, ScalarField2D
from .geomodel import GeomodelSpec, generate_velocity_pair
from .helmholtz import SolverSettings, SourceSpec, solve_background, solve_full, solve_residual
from .typing import ComplexArray, RealArray
from .utils import derive_seed

logger = logging.getLogger(__name__)

MAGIC = b"SCAT"
VERSION = 1

FieldName = Literal["s", "v", "v_bg", "delta_v", "p", "p_bg", "delta_p"]

FIELD_NAMES: tuple[FieldName, ...] = ("s", "v", "v_bg", "delta_v", "p", "p_bg", "delta_p")
"""Every field a record can hold, in storage order."""

COMPLEX_FIELDS: frozenset[str] = frozenset(("s", "p", "p_bg", "delta_p"))
"""Fields that are stored as two planes."""

SUPERPOSITION_RTOL = 1e-8
"""Largest accepted `‖p_bg + δp - p‖ / ‖p‖` of a stored record."""

CONTRAST_ATOL = 1e-12
"""Largest accepted `|δv - (v - v_bg)|` of a stored record."""

_HEADER = struct.Struct("<4sIIIQdddI")
_RECORD_HEAD = struct.Struct("<QQ")


@dataclass(frozen=True, slots=True)
class DatasetRecord:
    """One generated sample."""

    sample_id: int
    """Index of the sample within its generation run."""

    seed: int
    """Seed the sample was generated from."""

    grid: Grid2D
    """Solver grid of every field."""

    frequency: float
    """Source frequency in Hz."""

    s: ComplexField2D | None = None
    v: ScalarField2D | None = None
    v_bg: ScalarField2D | None = None
    delta_v: ScalarField2D | None = None
    p: ComplexField2D | None = None
    p_bg: ComplexField2D | None = None
    delta_p: ComplexField2D | None = None

    metadata: Mapping[str, Any] = field(default_factory=dict, repr=False, compare=False)
    """Generation settings shared by every record of a dataset."""

    @property
    def fields(self) -> tuple[FieldName, ...]:
        """Names of the fields the record holds."""
        return tuple(name for name in FIELD_NAMES if getattr(self, name) is not None)

    @overload
    def require(self, name: Literal["s", "p", "p_bg", "delta_p"]) -> ComplexField2D: ...

    @overload
    def require(self, name: Literal["v", "v_bg", "delta_v"]) -> ScalarField2D: ...

    def require(self, name: FieldName) -> ScalarField2D | ComplexField2D:
        """
        Returns the named field.

        Raises:
            MissingFieldError: If the record does not hold the field.
        """
        value = getattr(self, name)
        if value is None:
            raise MissingFieldError(name)

        return value  # type: ignore[no-any-return]

    def check(self) -> None:
        """
        Checks the record invariants on the fields that are present.

        Raises:
            DomainError: If `p ≠ p_bg + δp` or `δv ≠ v - v_bg` beyond the accepted tolerance.
            ShapeError: If a field does not live on the record's grid.
        """
        for name in self.fields:
            self.grid.check_same(self.require(name).grid)  # type: ignore[call-overload]

        if self.p is not None and self.p_bg is not None and self.delta_p is not None:
            gap = float(np.linalg.norm(self.p_bg.values + self.delta_p.values - self.p.values))
            norm = float(np.linalg.norm(self.p.values))
            if norm == 0 or gap / norm > SUPERPOSITION_RTOL:
                raise DomainError(f"Sample {self.sample_id} violates p = p_bg + delta_p (gap {gap:.3e}).")

        if self.v is not None and self.v_bg is not None and self.delta_v is not None:
            if np.max(np.abs(self.v.values - self.v_bg.values - self.delta_v.values)) > CONTRAST_ATOL:
                raise DomainError(f"Sample {self.sample_id} violates delta_v = v - v_bg.")


@dataclass(frozen=True, slots=True)
class DatasetHeader:
    """Parsed container header."""

    grid: Grid2D
    frequency: float
    n_records: int
    metadata: Mapping[str, Any]

    @property
    def fields(self) -> tuple[FieldName, ...]:
        """The stored fields in storage order."""
        stored = set(self.metadata.get("fields", FIELD_NAMES))
        return tuple(name for name in FIELD_NAMES if name in stored)

    @property
    def record_size(self) -> int:
        """Size of one record in bytes."""
        planes = sum(2 if name in COMPLEX_FIELDS else 1 for name in self.fields)
        return _RECORD_HEAD.size + planes * self.grid.size * 8

    def pack(self) -> bytes:
        meta = json.dumps(dict(self.metadata), sort_keys=True).encode("utf-8")
        head = _HEADER.pack(
            MAGIC,
            VERSION,
            self.grid.nx,
            self.grid.ny,
            self.n_records,
            self.frequency,
            self.grid.lx,
            self.grid.ly,
            len(meta),
        )
        return head + meta

    @classmethod
    def read(cls, f: BinaryIO) -> tuple["DatasetHeader", int]:
        """
        Reads the header from the start of `f`.

        Returns:
            The header and its size in bytes.

        Raises:
            DatasetFormatError: If the magic, the version or the header itself is invalid.
        """
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise DatasetFormatError("Truncated dataset header.")

        magic, version, nx, ny, n_records, frequency, lx, ly, meta_len = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise DatasetFormatError(f"Not a dataset container (magic {magic!r}).")
        if version != VERSION:
            raise DatasetFormatError(f"Unsupported dataset version {version}.")

        meta = f.read(meta_len)
        if len(meta) < meta_len:
            raise DatasetFormatError("Truncated dataset metadata.")

        try:
            metadata = json.loads(meta.decode("utf-8"))
            grid = Grid2D(nx=nx, ny=ny, lx=lx, ly=ly)
        except (ValueError, HelmsplitError) as e:
            raise DatasetFormatError("Invalid dataset header.") from e

        header = cls(grid=grid, frequency=frequency, n_records=n_records, metadata=metadata)
        unknown = set(metadata.get("fields", FIELD_NAMES)) - set(FIELD_NAMES)
        if unknown:
            raise DatasetFormatError(f"Unknown dataset fields: {sorted(unknown)}.")

        return header, _HEADER.size + meta_len


def _pack_record(record: DatasetRecord, fields: Sequence[FieldName]) -> bytes:
    parts = [_RECORD_HEAD.pack(record.sample_id, record.seed)]
    for name in fields:
        values = record.require(name).values  # type: ignore[call-overload]
        if name in COMPLEX_FIELDS:
            parts.append(np.ascontiguousarray(values.real, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(values.imag, dtype="<f8").tobytes())
        else:
            parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())

    return b"".join(parts)


def _unpack_record(raw: bytes, header: DatasetHeader) -> DatasetRecord:
    sample_id, seed = _RECORD_HEAD.unpack_from(raw)
    planes = np.frombuffer(raw, dtype="<f8", offset=_RECORD_HEAD.size).reshape(-1, *header.grid.shape)
    values: dict[str, ScalarField2D | ComplexField2D] = {}
    k = 0
    for name in header.fields:
        if name in COMPLEX_FIELDS:
            values[name] = ComplexField2D(header.grid, planes[k] + 1j * planes[k + 1])
            k += 2
        else:
            values[name] = ScalarField2D(header.grid, planes[k].astype(np.float64))
            k += 1

    return DatasetRecord(
        sample_id=sample_id,
        seed=seed,
        grid=header.grid,
        frequency=header.frequency,
        metadata=header.metadata,
        **values,  # type: ignore[arg-type]
    )


class DatasetWriter:
    """
    Appends records to a new container.

    The record count in the header is rewritten when the writer is closed.

    Example:

    ```python
    with DatasetWriter(path, grid, frequency=9.0, metadata={"seed": 0}) as writer:
        writer.append(record)
    ```
    """

    __slots__ = ("_file", "_header", "_count")

    def __init__(
        self,
        path: Path,
        grid: Grid2D,
        *,
        frequency: float,
        metadata: Mapping[str, Any] | None = None,
        fields: Sequence[FieldName] = FIELD_NAMES,
    ) -> None:
        unknown = set(fields) - set(FIELD_NAMES)
        if unknown:
            raise ShapeError(f"Unknown dataset fields: {sorted(unknown)}.")

        meta = {**(metadata or {}), "fields": [name for name in FIELD_NAMES if name in fields]}
        self._header = DatasetHeader(grid=grid, frequency=frequency, n_records=0, metadata=meta)
        self._count = 0
        self._file: BinaryIO = path.open("wb")
        self._file.write(self._header.pack())

    @property
    def count(self) -> int:
        """Number of records written so far."""
        return self._count

    def append(self, record: DatasetRecord) -> None:
        """
        Validates and appends a record.

        Raises:
            DomainError: If the record violates its invariants.
            MissingFieldError: If the record lacks a stored field.
            ShapeError: If the record lives on another grid.
        """
        self._header.grid.check_same(record.grid)
        record.check()
        self._file.write(_pack_record(record, self._header.fields))
        self._count += 1

    def close(self) -> None:
        """Finalizes the header and closes the file."""
        if self._file.closed:
            return

        final = DatasetHeader(
            grid=self._header.grid,
            frequency=self._header.frequency,
            n_records=self._count,
            metadata=self._header.metadata,
        )
        self._file.seek(0)
        self._file.write(final.pack())
        self._file.close()

    def __enter__(self) -> "DatasetWriter":
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_value: BaseException | None,
        traceback: TracebackType | None,
    ) -> None:
        self.close()


class DatasetReader(Sequence[DatasetRecord]):
    """
    Random-access view of a container.

    Records are read on demand by offset, the file is only held open while reading.
    """

    __slots__ = ("path", "header", "_offset")

    def __init__(self, path: Path) -> None:
        """
        Raises:
            DatasetFormatError: If the container is malformed or truncated.
        """
        self.path = path
        with path.open("rb") as f:
            self.header, self._offset = DatasetHeader.read(f)

        expected = self._offset + self.header.n_records * self.header.record_size
        actual = path.stat().st_size
        if actual != expected:
            raise DatasetFormatError(f"Dataset size {actual} does not match the header ({expected} bytes).")

    def __len__(self) -> int:
        return self.header.n_records

    @overload
    def __getitem__(self, index: int) -> DatasetRecord: ...

    @overload
    def __getitem__(self, index: slice) -> list[DatasetRecord]: ...

    def __getitem__(self, index: int | slice) -> DatasetRecord | list[DatasetRecord]:
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]

        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)

        size = self.header.record_size
        with self.path.open("rb") as f:
            f.seek(self._offset + index * size)
            raw = f.read(size)

        return _unpack_record(raw, self.header)

    def __iter__(self) -> Iterator[DatasetRecord]:
        size = self.header.record_size
        with self.path.open("rb") as f:
            f.seek(self._offset)
            for _ in range(len(self)):
                yield _unpack_record(f.read(size), self.header)

    def find(self, sample_id: int) -> DatasetRecord:
        """
        Returns the record with the given sample id.

        Raises:
            KeyError: If there is no such record.
        """
        for record in self:
            if record.sample_id == sample_id:
                return record

        raise KeyError(f"No record with sample id {sample_id}.")


def write_dataset(
    path: Path,
    records: Iterable[DatasetRecord],
    *,
    grid: Grid2D,
    frequency: float,
    metadata: Mapping[str, Any] | None = None,
    fields: Sequence[FieldName] = FIELD_NAMES,
) -> int:
    """Writes every record into a new container and returns the record count."""
    with DatasetWriter(path, grid, frequency=frequency, metadata=metadata, fields=fields) as writer:
        for record in records:
            writer.append(record)

        return writer.count


def read_dataset(path: Path) -> list[DatasetRecord]:
    """Loads every record of a container into memory."""
    return list(DatasetReader(path))


@dataclass(frozen=True, slots=True)
class GenerationPlan:
    """Everything that determines the generated samples."""

    grid: Grid2D
    frequency: Frequency
    source: SourceSpec
    geomodel: GeomodelSpec
    solver: SolverSettings
    master_seed: int
    fields: tuple[FieldName, ...] = FIELD_NAMES

    def metadata(self) -> dict[str, Any]:
        """JSON-serializable description of the plan, stored in the container header."""
        return {
            "master_seed": self.master_seed,
            "source": self.source.model_dump(mode="json"),
            "geomodel": self.geomodel.model_dump(mode="json"),
            "sigma_salt": self.geomodel.resolved_sigma_salt(self.grid),
            "solver": self.solver.model_dump(mode="json"),
        }


def generate_record(plan: GenerationPlan, index: int) -> DatasetRecord:
    """
    Generates sample `index` of the plan: velocity pair, then the full, background and
    residual solves.

    The sample only depends on the plan and `index`.

    Raises:
        DegenerateFieldError: If no acceptable salt slice exists for the sample's seed.
        DomainError: If the sample violates the record invariants.
        SolverError: If a solve fails.
    """
    seed = derive_seed(plan.master_seed, index)
    pair = generate_velocity_pair(plan.geomodel, plan.grid, seed)
    source = plan.source.build(plan.grid)
    omega = plan.frequency.omega
    p, _ = solve_full(pair.v, source, omega, settings=plan.solver)
    p_bg, _ = solve_background(pair.v_bg, source, omega, settings=plan.solver)
    delta_p, _ = solve_residual(pair.v_bg, pair.v, p_bg, omega, settings=plan.solver)
    record = DatasetRecord(
        sample_id=index,
        seed=seed,
        grid=plan.grid,
        frequency=plan.frequency.f,
        s=source,
        v=pair.v,
        v_bg=pair.v_bg,
        delta_v=pair.delta_v,
        p=p,
        p_bg=p_bg,
        delta_p=delta_p,
    )
    record.check()
    return record


def _generate_or_reject(plan: GenerationPlan, index: int) -> DatasetRecord | str:
    try:
        return generate_record(plan, index)
    except HelmsplitError as e:
        return f"{type(e).__name__}: {e}"


@dataclass(frozen=True, slots=True)
class GenerationSummary:
    """Outcome of a generation run."""

    written: int
    """Number of stored records."""

    rejected: dict[int, str]
    """Reason of every rejected sample by sample index."""


def generate_dataset(
    plan: GenerationPlan,
    n_samples: int,
    out_path: Path,
    *,
    start: int = 0,
    workers: int = 1,
) -> GenerationSummary:
    """
    Generates samples `start, ..., start + n_samples - 1` into a new container.

    Samples are generated in parallel by `workers` processes and written in index order.
    Samples that fail are logged and reported in the summary.

    Raises:
        DomainError: If `n_samples` is negative or `workers` is not positive.
    """
    if n_samples < 0 or workers < 1:
        raise DomainError("n_samples must be non-negative and workers positive.")

    indices = range(start, start + n_samples)
    rejected: dict[int, str] = {}
    with DatasetWriter(
        out_path, plan.grid, frequency=plan.frequency.f, metadata=plan.metadata(), fields=plan.fields
    ) as writer:
        if workers == 1:
            results: Iterable[DatasetRecord | str] = (_generate_or_reject(plan, i) for i in indices)
            _collect(writer, indices, results, rejected)
        else:
            context = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
                results = pool.map(_generate_or_reject, [plan] * n_samples, indices)
                _collect(writer, indices, results, rejected)

        written = writer.count

    logger.info("Generated %d samples into %s, %d rejected.", written, out_path, len(rejected))
    return GenerationSummary(written=written, rejected=rejected)


def _collect(
    writer: DatasetWriter,
    indices: Iterable[int],
    results: Iterable[DatasetRecord | str],
    rejected: dict[int, str],
) -> None:
    for index, result in zip(indices, results, strict=True):
        if isinstance(result, str):
            logger.warning("Rejected sample %d: %s", index, result)
            rejected[index] = result
            continue

        writer.append(result)
        logger.info("Sample %d written (%d so far).", index, writer.count)


def complex_planes(values: ComplexArray) -> RealArray:
    """Splits a complex array into a leading `(re, im)` axis."""
    return np.stack((values.real, values.imag)).astype(np.float64)


def planes_to_complex(planes: RealArray) -> ComplexArray:
    """Inverse of `complex_planes()` on the axis `-3`."""
    return (planes[..., 0, :, :] + 1j * planes[..., 1, :, :]).astype(np.complex128)
