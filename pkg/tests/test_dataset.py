import struct
from pathlib import Path

import numpy as np
import pytest

from helmsplit import dataset
from helmsplit.dataset import (
    MAGIC,
    DatasetReader,
    DatasetRecord,
    DatasetWriter,
    GenerationPlan,
    complex_planes,
    generate_dataset,
    generate_record,
    planes_to_complex,
    read_dataset,
    write_dataset,
)
from helmsplit.errors import (
    DatasetFormatError,
    DegenerateFieldError,
    DomainError,
    MissingFieldError,
    ShapeError,
)
from helmsplit.fields import ComplexField2D, Grid2D, field_rel_l2

from .data import generated_records, small_plan, synthetic_records


def write(path: Path, records: list[DatasetRecord], **kwargs: object) -> int:
    return write_dataset(
        path,
        records,
        grid=records[0].grid,
        frequency=10.0,
        metadata={"note": "x"},
        **kwargs,  # type: ignore[arg-type]
    )


def test_container_roundtrip(tmp_path: Path) -> None:
    records = synthetic_records(3)
    path = tmp_path / "data.scat"
    assert write(path, records) == 3

    reader = DatasetReader(path)
    assert len(reader) == 3
    assert reader.header.grid == records[0].grid
    assert reader.header.frequency == 10.0
    assert reader.header.metadata["note"] == "x"
    assert reader.header.fields == dataset.FIELD_NAMES

    loaded = read_dataset(path)
    for original, restored in zip(records, loaded, strict=True):
        assert restored.sample_id == original.sample_id
        for name in dataset.FIELD_NAMES:
            assert np.array_equal(restored.require(name).values, original.require(name).values)

    assert reader[-1].sample_id == 2
    assert [r.sample_id for r in reader[1:]] == [1, 2]
    assert reader.find(1).sample_id == 1
    with pytest.raises(KeyError):
        reader.find(7)
    with pytest.raises(IndexError):
        reader[3]


def test_partial_fields(tmp_path: Path) -> None:
    records = synthetic_records(2)
    path = tmp_path / "partial.scat"
    write(path, records, fields=("p", "v", "s"))
    reader = DatasetReader(path)
    assert reader.header.fields == ("s", "v", "p")
    assert reader.header.record_size == 16 + 5 * 64 * 8
    record = reader[0]
    assert record.fields == ("s", "v", "p")
    with pytest.raises(MissingFieldError):
        record.require("p_bg")

    with pytest.raises(ShapeError):
        write(tmp_path / "bad.scat", records, fields=("p", "q"))


def test_writer_validates_records(tmp_path: Path) -> None:
    record = synthetic_records(1)[0]
    broken = DatasetRecord(
        sample_id=0,
        seed=0,
        grid=record.grid,
        frequency=10.0,
        p=record.p,
        p_bg=record.p_bg,
        delta_p=ComplexField2D.zeros(record.grid),
    )
    other = synthetic_records(1, Grid2D(nx=6, ny=6, lx=50.0, ly=50.0))[0]
    with DatasetWriter(tmp_path / "data.scat", record.grid, frequency=10.0) as writer:
        with pytest.raises(DomainError):
            writer.append(broken)
        with pytest.raises(ShapeError):
            writer.append(other)
        writer.append(record)

    assert len(DatasetReader(tmp_path / "data.scat")) == 1


def test_malformed_containers(tmp_path: Path) -> None:
    path = tmp_path / "data.scat"
    write(path, synthetic_records(2))
    data = path.read_bytes()
    assert data.startswith(MAGIC)

    cases = {
        "magic": b"XXXX" + data[4:],
        "version": data[:4] + struct.pack("<I", 7) + data[8:],
        "truncated": data[:-8],
        "header": data[:12],
    }
    for name, content in cases.items():
        broken = tmp_path / f"{name}.scat"
        broken.write_bytes(content)
        with pytest.raises(DatasetFormatError):
            DatasetReader(broken)


def test_complex_planes() -> None:
    values = np.array([[1 + 2j, 3 - 1j]])
    planes = complex_planes(values)
    assert planes.shape == (2, 1, 2)
    assert np.array_equal(planes_to_complex(planes), values)
    assert np.array_equal(planes_to_complex(np.stack((planes, 2 * planes))), np.stack((values, 2 * values)))


@pytest.mark.slow
def test_generated_records_satisfy_superposition() -> None:
    records = generated_records()
    for record in records:
        record.check()
        assert field_rel_l2(record.require("p_bg") + record.require("delta_p"), record.require("p")) < 1e-8
        assert np.any(record.require("delta_v").values != 0)
        assert np.all(record.require("delta_v").values[:3] == 0)

    assert len({r.seed for r in records}) == len(records)
    again = generate_record(small_plan(), 1)
    assert np.array_equal(again.require("p").values, records[1].require("p").values)
    assert again.seed == records[1].seed


@pytest.mark.slow
def test_generate_dataset(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    plan = small_plan()
    original = dataset.generate_record

    def flaky(plan: GenerationPlan, index: int) -> DatasetRecord:
        if index == 3:
            raise DegenerateFieldError("no salt")
        return original(plan, index)

    monkeypatch.setattr(dataset, "generate_record", flaky)
    path = tmp_path / "gen.scat"
    summary = generate_dataset(plan, 2, path, start=2)
    assert summary.written == 1
    assert list(summary.rejected) == [3]
    assert "no salt" in summary.rejected[3]

    reader = DatasetReader(path)
    assert [r.sample_id for r in reader] == [2]
    assert reader.header.metadata["master_seed"] == 0
    assert np.array_equal(reader[0].require("v").values, generated_records()[2].require("v").values)

    with pytest.raises(DomainError):
        generate_dataset(plan, 1, tmp_path / "x.scat", workers=0)
