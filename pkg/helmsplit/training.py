"""
Training harness: optimizer and schedule, dataset splits, the training loop, hybrid assembly
and evaluation.
"""

import copy
import csv
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import Field, PositiveFloat, model_validator
from torch import Tensor, nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader, TensorDataset

from .checkpoint import load_checkpoint
from .dataset import DatasetRecord, planes_to_complex
from .errors import ConfigError, DomainError, ShapeError, TrainingDivergedError
from .fields import ComplexField2D, field_rel_l2
from .geomodel import MollifierSpec
from .layers import as_tensor
from .models import FNO, HybridModel, Network, WindowTransformer, count_params
from .tasks import NormalizationStats, TaskKind, TaskSpec, get_task, residual_stack
from .typing import ComplexArray, Predictor, RealArray
from .utils import FrozenModel, timed

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_rel_l2", "val_rel_l2", "lr", "seconds")


class TrainConfig(FrozenModel):
    """Optimization settings."""

    epochs: int = Field(default=100, ge=1)
    """Number of passes over the training split."""

    max_lr: PositiveFloat = 1e-3
    """Peak learning rate, reached at the end of the warmup."""

    warmup_epochs: int = Field(default=5, ge=0)
    """Length of the linear warmup in epochs."""

    batch_size: int = Field(default=8, ge=1)
    """Mini-batch size."""

    weight_decay: float = Field(default=1e-4, ge=0.0)
    """Decoupled weight decay."""

    betas: tuple[float, float] = (0.9, 0.999)
    """Moment decay rates."""

    eps: PositiveFloat = 1e-8
    """Denominator offset of the update."""

    seed: int = 0
    """Seed of the split, the batch order and the initialization."""

    precision: Literal["single", "double"] = "single"
    """Floating point precision of the parameters. Losses are always accumulated in double."""

    record_timing: bool = True
    """Record wall times; `False` writes `0.0` so that repeated runs are byte-identical."""

    @model_validator(mode="after")
    def _check_warmup(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs.")

        return self

    @property
    def dtype(self) -> torch.dtype:
        """Parameter dtype."""
        return torch.float32 if self.precision == "single" else torch.float64


@dataclass(slots=True)
class AdamWState:
    """Moments and step counter of `adamw_step()`."""

    step: int
    exp_avg: list[Tensor]
    exp_avg_sq: list[Tensor]

    @classmethod
    def zeros(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls(
            step=0,
            exp_avg=[torch.zeros_like(p) for p in params],
            exp_avg_sq=[torch.zeros_like(p) for p in params],
        )


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor],
    state: AdamWState,
    cfg: TrainConfig,
    lr: float,
) -> tuple[list[Tensor], AdamWState]:
    """
    One decoupled-weight-decay Adam update:
    `θ ← θ - lr·m̂ / (√v̂ + ε) - lr·λ·θ` with bias-corrected moments `m̂`, `v̂`.

    The arguments are not modified.

    Raises:
        ShapeError: If parameters, gradients and moments do not match.
    """
    if not (len(params) == len(grads) == len(state.exp_avg) == len(state.exp_avg_sq)):
        raise ShapeError("Parameters, gradients and optimizer state differ in length.")

    beta1, beta2 = cfg.betas
    step = state.step + 1
    correction1 = 1 - beta1**step
    correction2 = 1 - beta2**step
    updated, exp_avg, exp_avg_sq = [], [], []
    for theta, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq, strict=True):
        if theta.shape != g.shape:
            raise ShapeError(f"Gradient shape {tuple(g.shape)} differs from {tuple(theta.shape)}.")

        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        adam = (m / correction1) / ((v / correction2).sqrt() + cfg.eps)
        updated.append(theta * (1 - lr * cfg.weight_decay) - lr * adam)
        exp_avg.append(m)
        exp_avg_sq.append(v)

    return updated, AdamWState(step=step, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """
    Learning rate of optimizer step `step` (0-based): a linear ramp from 0 to `max_lr` over the
    warmup, then cosine decay to 0 at step `epochs * steps_per_epoch`.

    Raises:
        DomainError: If `step` is negative or `steps_per_epoch` is not positive.
    """
    if step < 0 or steps_per_epoch < 1:
        raise DomainError("step must be non-negative and steps_per_epoch positive.")

    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.max_lr * step / warmup

    t = min(1.0, (step - warmup) / (total - warmup))
    return cfg.max_lr * (1 + math.cos(math.pi * t)) / 2


def split_dataset(
    n: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Seeded train/validation/test split: shuffles `0..n-1` and cuts at `⌊r₀·n⌋` and
    `⌊(r₀ + r₁)·n⌋`.

    Raises:
        DomainError: If `n < 3` or the ratios do not sum to 1.
    """
    if n < 3:
        raise DomainError(f"Cannot split {n} samples into three parts.")
    if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise DomainError(f"Split ratios {ratios} do not sum to 1.")

    order = np.random.default_rng(seed).permutation(n)
    first = math.floor(ratios[0] * n + 1e-9)
    second = math.floor((ratios[0] + ratios[1]) * n + 1e-9)
    return order[:first], order[first:second], order[second:]


def rel_l2_per_sample(pred: Tensor, target: Tensor) -> Tensor:
    """Relative L2 error of every sample of a batch, in double precision."""
    diff = (pred.double() - target.double()).flatten(1).norm(dim=1)
    return diff / target.double().flatten(1).norm(dim=1)


@dataclass(frozen=True, slots=True)
class EpochRecord:
    """One row of the training history."""

    epoch: int
    train_rel_l2: float
    val_rel_l2: float
    lr: float
    """Learning rate of the last step of the epoch."""
    seconds: float


@dataclass(slots=True)
class TrainHistory:
    """Per-epoch losses and the provenance of a training run."""

    config: TrainConfig
    task: TaskKind
    provenance: str = ""
    """Digest of the training indices."""
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_rel_l2(self) -> float:
        """Validation error of the selected epoch."""
        return self.records[self.best_epoch].val_rel_l2

    def write_csv(self, path: Path) -> None:
        """Writes the `epoch,train_rel_l2,val_rel_l2,lr,seconds` table."""
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow(
                    [r.epoch, repr(r.train_rel_l2), repr(r.val_rel_l2), repr(r.lr), repr(r.seconds)]
                )

    def write_provenance(self, path: Path) -> None:
        """Writes the configuration, the task, the selection and the split digest as JSON."""
        payload = {
            "task": self.task.value,
            "config": self.config.model_dump(mode="json"),
            "best_epoch": self.best_epoch,
            "best_val_rel_l2": self.best_val_rel_l2 if self.records else None,
            "train_indices_sha256": self.provenance,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read_csv(cls, path: Path, config: TrainConfig, task: TaskKind) -> "TrainHistory":
        """Reads a table written by `write_csv()`, the best epoch is recomputed."""
        with path.open(newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))

        records = [
            EpochRecord(
                epoch=int(row["epoch"]),
                train_rel_l2=float(row["train_rel_l2"]),
                val_rel_l2=float(row["val_rel_l2"]),
                lr=float(row["lr"]),
                seconds=float(row["seconds"]),
            )
            for row in rows
        ]
        best = min(range(len(records)), key=lambda i: records[i].val_rel_l2) if records else -1
        return cls(config=config, task=task, records=records, best_epoch=best)


def _mean_rel_l2(model: nn.Module, tensors: Sequence[Tensor], batch_size: int) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(tensors[0]), batch_size):
            *xs, y = (t[start : start + batch_size] for t in tensors)
            total += float(rel_l2_per_sample(model(*xs), y).sum())

    return total / len(tensors[0])


def _fit(
    model: nn.Module,
    train: Sequence[Tensor],
    val: Sequence[Tensor],
    cfg: TrainConfig,
    history: TrainHistory,
) -> None:
    """Mini-batch AdamW on the per-sample Rel-L2, keeping the weights of the best validation epoch."""
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(TensorDataset(*train), batch_size=cfg.batch_size, shuffle=True, generator=generator)
    steps_per_epoch = len(loader)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.max_lr,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )
    scheduler = LambdaLR(optimizer, lambda step: lr_at(step, steps_per_epoch, cfg) / cfg.max_lr)

    best_state: dict[str, Tensor] | None = None
    best_val = math.inf
    for epoch in range(cfg.epochs):
        with timed() as watch:
            model.train()
            total, lr = 0.0, 0.0
            for batch_index, (*xs, y) in enumerate(loader):
                lr = float(optimizer.param_groups[0]["lr"])
                optimizer.zero_grad()
                per_sample = rel_l2_per_sample(model(*xs), y)
                loss = per_sample.mean()
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(lr=lr, batch_index=batch_index, epoch=epoch)

                loss.backward()
                optimizer.step()
                scheduler.step()
                total += float(per_sample.detach().sum())

            model.eval()
            val_rel_l2 = _mean_rel_l2(model, val, cfg.batch_size)

        record = EpochRecord(
            epoch=epoch,
            train_rel_l2=total / len(train[0]),
            val_rel_l2=val_rel_l2,
            lr=lr,
            seconds=watch.seconds if cfg.record_timing else 0.0,
        )
        history.records.append(record)
        if val_rel_l2 < best_val:
            best_val = val_rel_l2
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch

        logger.info(
            "Epoch %d/%d: train %.4e, val %.4e, lr %.3e.",
            epoch + 1,
            cfg.epochs,
            record.train_rel_l2,
            val_rel_l2,
            lr,
        )

    if best_state is None:
        raise TrainingDivergedError(lr=math.nan, batch_index=-1, epoch=cfg.epochs - 1)

    model.load_state_dict(best_state)


def task_arrays(
    task: TaskSpec,
    dataset: Sequence[DatasetRecord],
    *,
    background_predictor: Predictor | None = None,
) -> tuple[RealArray, RealArray]:
    """
    Input and target stacks of every record.

    With a `background_predictor`, the residual task's background channels are replaced by the
    predictor's output.

    Raises:
        ConfigError: If a background predictor is given for another task than `residual`.
        MissingFieldError: If a record lacks a required field.
    """
    if background_predictor is None:
        return task.arrays(dataset)

    if task.kind != TaskKind.RESIDUAL:
        raise ConfigError("Predicted backgrounds are only used by the residual task.")

    predicted = background_predictor.predict(dataset)
    inputs = np.stack(
        [
            residual_stack(p_bg, r.require("delta_v").values, r.grid)
            for p_bg, r in zip(predicted, dataset, strict=True)
        ]
    )
    targets = np.stack([task.target_stack(r) for r in dataset])
    return inputs, targets


Splits = tuple[np.ndarray, np.ndarray, np.ndarray]


def train_task(
    task: TaskSpec,
    model: Network,
    dataset: Sequence[DatasetRecord],
    cfg: TrainConfig,
    *,
    splits: Splits | None = None,
    background_predictor: Predictor | None = None,
) -> tuple[Network, TrainHistory]:
    """
    Trains `model` on a task and returns it with the weights of the best validation epoch.

    Normalization statistics are computed from the training split only and stored in the
    model. The run is deterministic given `cfg.seed`.

    Arguments:
        task: The learning task.
        model: Freshly initialized network, converted to `cfg.precision`.
        dataset: The records, indexed by `splits`.
        cfg: Optimization settings.
        splits: Train, validation and test indices, `split_dataset(len(dataset), seed=cfg.seed)`
            if not set.
        background_predictor: Optional predictor of the background field for the residual task
            (training on predicted instead of solver backgrounds).

    Raises:
        DomainError: If the training or the validation split is empty.
        MissingFieldError: If a record lacks a field the task needs.
        ShapeError: If the task's channels do not match the model.
        TrainingDivergedError: If the loss becomes NaN or infinite.
    """
    train_idx, val_idx, _ = split_dataset(len(dataset), seed=cfg.seed) if splits is None else splits
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise DomainError("Training needs non-empty training and validation splits.")
    if task.in_channels != model.in_channels:
        raise ShapeError(
            f"Task {task.kind} has {task.in_channels} channels, the model expects {model.in_channels}."
        )

    inputs, targets = task_arrays(task, dataset, background_predictor=background_predictor)
    stats = NormalizationStats.fit(inputs[train_idx], targets[train_idx], train_idx)
    model = model.to(cfg.dtype)
    model.normalizer.load_stats(stats)
    model.task = task.kind

    x = torch.as_tensor(inputs, dtype=cfg.dtype)
    y = torch.as_tensor(targets, dtype=cfg.dtype)
    train_rows = torch.as_tensor(train_idx, dtype=torch.long)
    val_rows = torch.as_tensor(val_idx, dtype=torch.long)
    history = TrainHistory(config=cfg, task=task.kind, provenance=stats.provenance)
    logger.info(
        "Training %s on the %s task: %d train, %d validation samples.",
        model.kind,
        task.kind,
        len(train_idx),
        len(val_idx),
    )
    _fit(model, (x[train_rows], y[train_rows]), (x[val_rows], y[val_rows]), cfg, history)
    return model, history


class NetworkPredictor:
    """`Predictor` adapter of a standalone network on its task."""

    __slots__ = ("model", "task", "batch_size")

    def __init__(self, model: Network, task: TaskSpec | None = None, *, batch_size: int = 16) -> None:
        """
        Raises:
            ConfigError: If no task is given and the model does not know its task.
        """
        if task is None:
            if model.task is None:
                raise ConfigError("The model's task is unknown.")
            task = get_task(model.task)

        self.model = model
        self.task = task
        self.batch_size = batch_size

    def predict(self, records: Sequence[DatasetRecord]) -> ComplexArray:
        like = next(self.model.parameters())
        self.model.eval()
        outputs = []
        with torch.no_grad():
            for start in range(0, len(records), self.batch_size):
                batch = records[start : start + self.batch_size]
                x = as_tensor(np.stack([self.task.input_stack(r) for r in batch]), like)
                outputs.append(self.model(x).double().cpu().numpy())

        return planes_to_complex(np.concatenate(outputs))

    def parameter_count(self) -> int:
        return count_params(self.model)


class ZeroPredictor:
    """Baseline that predicts a zero field."""

    __slots__ = ()

    def predict(self, records: Sequence[DatasetRecord]) -> ComplexArray:
        return np.zeros((len(records), *records[0].grid.shape), dtype=np.complex128)

    def parameter_count(self) -> int:
        return 0


def assemble_hybrid(
    fno: FNO | Path,
    vit: WindowTransformer | Path,
    mollifier: MollifierSpec,
    *,
    fine_tune: bool = False,
    dataset: Sequence[DatasetRecord] | None = None,
    cfg: TrainConfig | None = None,
    splits: Splits | None = None,
) -> HybridModel:
    """
    Composes an FNO trained on the smooth task and a transformer trained on the residual task.

    The branches are used as trained. With `fine_tune`, the composition is additionally trained
    end to end on the sharp task of `dataset`.

    Raises:
        ConfigError: If the networks were trained on other tasks, lack normalization statistics,
            have incompatible grids, or fine-tuning lacks its dataset or configuration.
    """
    fno_net = load_checkpoint(fno) if isinstance(fno, Path) else fno
    vit_net = load_checkpoint(vit) if isinstance(vit, Path) else vit
    if not isinstance(fno_net, FNO) or fno_net.task != TaskKind.SMOOTH:
        raise ConfigError("The background branch must be an FNO trained on the smooth task.")
    if not isinstance(vit_net, WindowTransformer) or vit_net.task != TaskKind.RESIDUAL:
        raise ConfigError("The scattering branch must be a transformer trained on the residual task.")

    dtype = next(fno_net.parameters()).dtype
    hybrid = HybridModel(fno_net, vit_net.to(dtype), mollifier).to(dtype)
    hybrid.require_stats()
    if fine_tune:
        if dataset is None or cfg is None:
            raise ConfigError("Hybrid fine-tuning needs a dataset and a training configuration.")
        fine_tune_hybrid(hybrid, dataset, cfg, splits=splits)

    return hybrid


def fine_tune_hybrid(
    hybrid: HybridModel,
    dataset: Sequence[DatasetRecord],
    cfg: TrainConfig,
    *,
    splits: Splits | None = None,
) -> TrainHistory:
    """Trains both branches jointly on `(v, s) → p`, keeping their normalization statistics."""
    train_idx, val_idx, _ = split_dataset(len(dataset), seed=cfg.seed) if splits is None else splits
    prepared = [hybrid.prepare(r.require("v"), r.require("s")) for r in dataset]
    sharp = get_task(TaskKind.SHARP)
    hybrid.to(cfg.dtype)
    tensors = (
        torch.as_tensor(np.stack([p[0] for p in prepared]), dtype=cfg.dtype),
        torch.as_tensor(np.stack([p[1] for p in prepared]), dtype=cfg.dtype),
        torch.as_tensor(np.stack([sharp.target_stack(r) for r in dataset]), dtype=cfg.dtype),
    )
    train_rows = torch.as_tensor(train_idx, dtype=torch.long)
    val_rows = torch.as_tensor(val_idx, dtype=torch.long)
    history = TrainHistory(config=cfg, task=TaskKind.SHARP)
    _fit(hybrid, [t[train_rows] for t in tensors], [t[val_rows] for t in tensors], cfg, history)
    return history


@dataclass(frozen=True, slots=True)
class MetricsRecord:
    """Evaluation of a predictor on a set of records."""

    model: str
    task: TaskKind
    n_samples: int
    mean_rel_l2: float
    median_rel_l2: float
    max_rel_l2: float
    params: int
    seconds: float
    per_sample: tuple[float, ...]

    def scaling_point(self) -> tuple[int, float]:
        """`(parameter count, mean Rel-L2)`."""
        return self.params, self.mean_rel_l2

    def write(self, path: Path) -> None:
        """Writes the record as flat `key=value` lines."""
        values = asdict(self)
        values["task"] = self.task.value
        values["per_sample"] = ",".join(repr(v) for v in self.per_sample)
        lines = [
            f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}"
            for key, value in values.items()
        ]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate(
    predictor: Predictor,
    records: Sequence[DatasetRecord],
    task: TaskSpec,
    *,
    name: str = "model",
    record_timing: bool = True,
) -> MetricsRecord:
    """
    Per-sample Rel-L2 of the predictor against the task's target field, with aggregates.

    Raises:
        DegenerateFieldError: If a target field is zero.
        DomainError: If `records` is empty.
        MissingFieldError: If a record lacks the target field.
    """
    if len(records) == 0:
        raise DomainError("Cannot evaluate on an empty set of records.")

    with timed() as watch:
        predictions = predictor.predict(records)

    errors = np.array(
        [
            field_rel_l2(ComplexField2D(r.grid, pred), ComplexField2D(r.grid, task.target_field(r)))
            for pred, r in zip(predictions, records, strict=True)
        ]
    )
    return MetricsRecord(
        model=name,
        task=task.kind,
        n_samples=len(records),
        mean_rel_l2=float(errors.mean()),
        median_rel_l2=float(np.median(errors)),
        max_rel_l2=float(errors.max()),
        params=predictor.parameter_count(),
        seconds=watch.seconds if record_timing else 0.0,
        per_sample=tuple(float(e) for e in errors),
    )
