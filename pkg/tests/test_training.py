import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from helmsplit.checkpoint import save_checkpoint
from helmsplit.errors import ConfigError, DomainError, ShapeError, TrainingDivergedError
from helmsplit.geomodel import MollifierSpec
from helmsplit.models import build_model
from helmsplit.tasks import TaskKind, get_task, indices_digest
from helmsplit.training import (
    AdamWState,
    NetworkPredictor,
    TrainConfig,
    TrainHistory,
    ZeroPredictor,
    adamw_step,
    assemble_hybrid,
    evaluate,
    fine_tune_hybrid,
    lr_at,
    rel_l2_per_sample,
    split_dataset,
    task_arrays,
    train_task,
)
from helmsplit.verify import tiny_fno_config, tiny_vit_config

from .data import synthetic_records


def quick_config(**kwargs: object) -> TrainConfig:
    values: dict[str, object] = {
        "epochs": 3,
        "warmup_epochs": 1,
        "batch_size": 4,
        "max_lr": 1e-3,
        "precision": "double",
        "record_timing": False,
    }
    return TrainConfig.model_validate({**values, **kwargs})


def test_train_config_validation() -> None:
    with pytest.raises(ValidationError):
        TrainConfig(epochs=5, warmup_epochs=5)
    assert TrainConfig().dtype == torch.float32
    assert quick_config().dtype == torch.float64


def test_learning_rate_schedule() -> None:
    cfg = TrainConfig(epochs=10, warmup_epochs=2, max_lr=1.0)
    assert lr_at(0, 4, cfg) == 0.0
    assert lr_at(4, 4, cfg) == pytest.approx(0.5)
    assert lr_at(8, 4, cfg) == pytest.approx(1.0)
    assert lr_at(24, 4, cfg) == pytest.approx(0.5)
    assert lr_at(40, 4, cfg) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(100, 4, cfg) == pytest.approx(0.0, abs=1e-15)
    no_warmup = TrainConfig(epochs=10, warmup_epochs=0, max_lr=1.0)
    assert lr_at(0, 4, no_warmup) == 1.0

    with pytest.raises(DomainError):
        lr_at(-1, 4, cfg)
    with pytest.raises(DomainError):
        lr_at(0, 0, cfg)


def test_adamw_step_matches_torch() -> None:
    torch.manual_seed(0)
    cfg = TrainConfig(weight_decay=0.1)
    theta = torch.randn(3, 4, dtype=torch.float64)
    reference = theta.clone().requires_grad_(True)
    optimizer = torch.optim.AdamW(
        [reference], lr=0.01, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay, foreach=False
    )

    params, state = [theta], AdamWState.zeros([theta])
    for _ in range(3):
        grad = torch.randn(3, 4, dtype=torch.float64)
        reference.grad = grad.clone()
        optimizer.step()
        params, state = adamw_step(params, [grad], state, cfg, 0.01)

    assert state.step == 3
    assert torch.allclose(params[0], reference.detach(), rtol=1e-10, atol=1e-12)

    with pytest.raises(ShapeError):
        adamw_step([theta], [torch.zeros(4, 3, dtype=torch.float64)], AdamWState.zeros([theta]), cfg, 0.01)
    with pytest.raises(ShapeError):
        adamw_step([theta], [], AdamWState.zeros([theta]), cfg, 0.01)


def test_split_dataset() -> None:
    train, val, test = split_dataset(10, seed=3)
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    assert sorted(np.concatenate((train, val, test)).tolist()) == list(range(10))
    again = split_dataset(10, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip((train, val, test), again, strict=True))
    assert not np.array_equal(train, split_dataset(10, seed=4)[0])
    assert [len(part) for part in split_dataset(7, (0.6, 0.2, 0.2))] == [4, 1, 2]

    with pytest.raises(DomainError):
        split_dataset(2)
    with pytest.raises(DomainError):
        split_dataset(10, (0.5, 0.2, 0.2))


def test_rel_l2_per_sample() -> None:
    target = torch.ones(2, 2, 3, 3)
    pred = torch.stack((torch.ones(2, 3, 3), torch.zeros(2, 3, 3)))
    assert rel_l2_per_sample(pred, target).tolist() == [0.0, 1.0]
    assert rel_l2_per_sample(pred, target).dtype == torch.float64


def test_train_task_is_deterministic(tmp_path: Path) -> None:
    records = synthetic_records(10)
    task = get_task(TaskKind.SMOOTH)
    cfg = quick_config()

    def run() -> tuple[torch.nn.Module, TrainHistory]:
        model = build_model("fno", tiny_fno_config(), 4, (8, 8), seed=cfg.seed)
        return train_task(task, model, records, cfg)  # type: ignore[return-value]

    model, history = run()
    other, other_history = run()
    assert [r.epoch for r in history.records] == [0, 1, 2]
    assert history.records == other_history.records
    assert all(torch.equal(p, q) for p, q in zip(model.parameters(), other.parameters(), strict=True))
    assert history.best_val_rel_l2 == min(r.val_rel_l2 for r in history.records)
    assert model.task is TaskKind.SMOOTH  # type: ignore[comparison-overlap]

    train_idx, _, _ = split_dataset(10, seed=cfg.seed)
    assert model.normalizer.provenance == indices_digest(train_idx)  # type: ignore[union-attr]
    assert history.provenance == indices_digest(train_idx)

    history.write_csv(tmp_path / "history.csv")
    history.write_csv(tmp_path / "again.csv")
    assert (tmp_path / "history.csv").read_bytes() == (tmp_path / "again.csv").read_bytes()
    restored = TrainHistory.read_csv(tmp_path / "history.csv", cfg, TaskKind.SMOOTH)
    assert restored.records == history.records
    assert restored.best_epoch == history.best_epoch

    history.write_provenance(tmp_path / "history.json")
    payload = json.loads((tmp_path / "history.json").read_text())
    assert payload["task"] == "smooth"
    assert payload["train_indices_sha256"] == history.provenance
    assert payload["config"]["epochs"] == 3


def test_train_task_validation() -> None:
    records = synthetic_records(10)
    model = build_model("fno", tiny_fno_config(), 4, (8, 8))
    with pytest.raises(ShapeError):
        train_task(get_task(TaskKind.RESIDUAL), model, records, quick_config())

    empty = (np.arange(8), np.array([], dtype=int), np.arange(8, 10))
    with pytest.raises(DomainError):
        train_task(get_task(TaskKind.SMOOTH), model, records, quick_config(), splits=empty)


def test_non_finite_loss_stops_training() -> None:
    model = build_model("fno", tiny_fno_config(), 4, (8, 8))
    with torch.no_grad():
        next(model.parameters()).fill_(math.nan)
    with pytest.raises(TrainingDivergedError) as info:
        train_task(get_task(TaskKind.SMOOTH), model, synthetic_records(10), quick_config())
    assert info.value.epoch == 0
    assert info.value.batch_index == 0


def test_task_arrays_with_predicted_background() -> None:
    records = synthetic_records(3)
    residual = get_task(TaskKind.RESIDUAL)
    inputs, targets = task_arrays(residual, records, background_predictor=ZeroPredictor())
    solver_inputs, solver_targets = task_arrays(residual, records)
    assert np.all(inputs[:, :2] == 0)
    assert np.array_equal(inputs[:, 2:], solver_inputs[:, 2:])
    assert np.array_equal(targets, solver_targets)

    with pytest.raises(ConfigError):
        task_arrays(get_task(TaskKind.SMOOTH), records, background_predictor=ZeroPredictor())


def test_evaluate(tmp_path: Path) -> None:
    records = synthetic_records(3)
    metrics = evaluate(ZeroPredictor(), records, get_task(TaskKind.SHARP), name="zero", record_timing=False)
    assert metrics.n_samples == 3
    assert metrics.per_sample == (1.0, 1.0, 1.0)
    assert metrics.mean_rel_l2 == metrics.median_rel_l2 == metrics.max_rel_l2 == 1.0
    assert metrics.scaling_point() == (0, 1.0)
    assert metrics.seconds == 0.0

    metrics.write(tmp_path / "metrics.txt")
    lines = (tmp_path / "metrics.txt").read_text().splitlines()
    assert "model=zero" in lines
    assert "task=sharp" in lines
    assert "per_sample=1.0,1.0,1.0" in lines

    with pytest.raises(DomainError):
        evaluate(ZeroPredictor(), [], get_task(TaskKind.SHARP))


def test_network_predictor() -> None:
    model = build_model("fno", tiny_fno_config(), 4, (8, 8))
    with pytest.raises(ConfigError):
        NetworkPredictor(model)

    model.task = TaskKind.SHARP
    predictor = NetworkPredictor(model, batch_size=2)
    predictions = predictor.predict(synthetic_records(3))
    assert predictions.shape == (3, 8, 8)
    assert predictions.dtype == np.complex128
    assert predictor.parameter_count() > 0


def trained_branches() -> tuple[torch.nn.Module, torch.nn.Module]:
    records = synthetic_records(10)
    cfg = quick_config(epochs=2)
    fno = build_model("fno", tiny_fno_config(), 4, (8, 8))
    vit = build_model("vit", tiny_vit_config(), 5, (8, 8))
    fno, _ = train_task(get_task(TaskKind.SMOOTH), fno, records, cfg)
    vit, _ = train_task(get_task(TaskKind.RESIDUAL), vit, records, cfg)
    return fno, vit


def test_assemble_hybrid(tmp_path: Path) -> None:
    fno, vit = trained_branches()
    with pytest.raises(ConfigError):
        assemble_hybrid(vit, fno, MollifierSpec())  # type: ignore[arg-type]
    with pytest.raises(ConfigError):
        assemble_hybrid(fno, vit, MollifierSpec(), fine_tune=True)  # type: ignore[arg-type]

    save_checkpoint(fno, tmp_path / "fno.ckpt")  # type: ignore[arg-type]
    hybrid = assemble_hybrid(tmp_path / "fno.ckpt", vit, MollifierSpec())  # type: ignore[arg-type]
    records = synthetic_records(2, seed=5)
    predictions = hybrid.predict(records)
    assert predictions.shape == (2, 8, 8)

    untrained = build_model("fno", tiny_fno_config(), 4, (8, 8))
    untrained.task = TaskKind.SMOOTH
    with pytest.raises(ConfigError):
        assemble_hybrid(untrained, vit, MollifierSpec())  # type: ignore[arg-type]


@pytest.mark.slow
def test_fine_tune_hybrid() -> None:
    fno, vit = trained_branches()
    hybrid = assemble_hybrid(fno, vit, MollifierSpec())  # type: ignore[arg-type]
    stats = hybrid.fno.normalizer.stats()
    history = fine_tune_hybrid(hybrid, synthetic_records(10), quick_config(epochs=2))
    assert history.task is TaskKind.SHARP
    assert len(history.records) == 2
    assert np.array_equal(hybrid.fno.normalizer.stats().input_mean, stats.input_mean)
