"""
Result artifacts: the scaling table, figures and the HTML report.

Figures are rendered with matplotlib's Agg backend into PNG files without embedded software
metadata, so a figure is a pure function of its input data.
"""

import csv
from collections.abc import Callable, Collection, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from jinja2 import Environment, PackageLoader, select_autoescape  # noqa: E402

from .dataset import DatasetRecord  # noqa: E402
from .errors import DomainError, ShapeError  # noqa: E402
from .training import MetricsRecord, TrainHistory  # noqa: E402
from .typing import ComplexArray  # noqa: E402

SCALING_COLUMNS = ("model", "architecture", "params", "mean_rel_l2")

_PNG_METADATA: dict[str, str | None] = {"Software": None}
_ARCHITECTURE_STYLES = {"fno": "o-", "vit": "s-", "hybrid": "^-"}


@dataclass(frozen=True, slots=True)
class ScalingRow:
    """One `(parameters, error)` point of the scaling study."""

    model: str
    """Run name, for example `hybrid-2`."""

    architecture: str
    """`fno`, `vit` or `hybrid`."""

    params: int
    mean_rel_l2: float

    @classmethod
    def from_metrics(cls, metrics: MetricsRecord, architecture: str) -> "ScalingRow":
        params, error = metrics.scaling_point()
        return cls(model=metrics.model, architecture=architecture, params=params, mean_rel_l2=error)


def write_scaling_csv(rows: Iterable[ScalingRow], path: Path) -> None:
    """Writes the `model,architecture,params,mean_rel_l2` table."""
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SCALING_COLUMNS)
        for row in rows:
            writer.writerow([row.model, row.architecture, row.params, repr(row.mean_rel_l2)])


def read_scaling_csv(path: Path) -> list[ScalingRow]:
    """Reads a table written by `write_scaling_csv()`."""
    with path.open(newline="", encoding="utf-8") as f:
        return [
            ScalingRow(
                model=row["model"],
                architecture=row["architecture"],
                params=int(row["params"]),
                mean_rel_l2=float(row["mean_rel_l2"]),
            )
            for row in csv.DictReader(f)
        ]


def plot_scaling(
    rows: Sequence[ScalingRow],
    path: Path,
    *,
    architectures: Collection[str] | None = None,
) -> Path:
    """
    Plots mean Rel-L2 against parameter count, one line per architecture, on log-log axes.

    Arguments:
        rows: The scaling table.
        path: Output PNG file.
        architectures: Architectures to include, all of them if not set.
    """
    fig, ax = plt.subplots(figsize=(5.0, 4.0), dpi=100)
    try:
        names = sorted(
            {r.architecture for r in rows if architectures is None or r.architecture in architectures}
        )
        for name in names:
            points = sorted((r.params, r.mean_rel_l2) for r in rows if r.architecture == name)
            ax.plot(
                [p for p, _ in points],
                [e for _, e in points],
                _ARCHITECTURE_STYLES.get(name, "x-"),
                label=name,
            )

        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("parameters")
        ax.set_ylabel("mean Rel-L2")
        if names:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_METADATA)
    finally:
        plt.close(fig)

    return path


def plot_history(history: TrainHistory, path: Path, *, title: str = "") -> Path:
    """
    Plots training and validation Rel-L2 per epoch on a log scale and marks the selected epoch.

    Raises:
        DomainError: If the history has no epochs.
    """
    if not history.records:
        raise DomainError("Cannot plot an empty training history.")

    epochs = [r.epoch for r in history.records]
    fig, ax = plt.subplots(figsize=(5.0, 4.0), dpi=100)
    try:
        ax.plot(epochs, [r.train_rel_l2 for r in history.records], "-", label="train")
        ax.plot(epochs, [r.val_rel_l2 for r in history.records], "--", label="validation")
        best = history.records[history.best_epoch]
        ax.plot([best.epoch], [best.val_rel_l2], "k*", label="selected")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("Rel-L2")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="png", metadata=_PNG_METADATA)
    finally:
        plt.close(fig)

    return path


@dataclass(frozen=True, slots=True)
class RenderResult:
    """Files and shared color limits of a rendered sample."""

    paths: dict[str, Path]
    """Image path by panel name (`truth`, `<model>`, `<model>-error`)."""

    real_limit: float
    """Symmetric color limit of every real-part panel."""

    error_limit: float
    """Upper color limit of every error panel."""

    error_sums: dict[str, float]
    """Discrete integral of `|p̂ - p|` by model."""


def render_sample(
    record: DatasetRecord,
    predictions: Mapping[str, ComplexArray],
    out_dir: Path,
    *,
    real_cmap: str = "seismic",
    error_cmap: str = "magma",
) -> RenderResult:
    """
    Writes `Re p` of the ground truth and of every prediction, and the `|p̂ - p|` error maps.

    All real-part panels share one symmetric color scale and all error panels share one upper
    limit, both taken over every panel of the sample.

    Raises:
        MissingFieldError: If the record has no total field.
        ShapeError: If a prediction does not match the record's grid.
    """
    truth = record.require("p")
    for name, pred in predictions.items():
        if pred.shape != truth.values.shape:
            raise ShapeError(f"Prediction {name!r} has shape {pred.shape}, expected {truth.values.shape}.")

    errors = {name: np.abs(pred - truth.values) for name, pred in predictions.items()}
    real_limit = max(float(np.abs(panel.real).max()) for panel in (truth.values, *predictions.values()))
    error_limit = max([float(e.max()) for e in errors.values()], default=0.0)
    real_limit = real_limit if real_limit > 0 else 1.0
    error_vmax = error_limit if error_limit > 0 else 1.0

    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"sample-{record.sample_id}"
    paths: dict[str, Path] = {}

    def save(name: str, image: np.ndarray, vmin: float, vmax: float, cmap: str) -> None:
        path = out_dir / f"{stem}-{name}.png"
        plt.imsave(path, image, vmin=vmin, vmax=vmax, cmap=cmap, format="png", metadata=_PNG_METADATA)
        paths[name] = path

    save("truth", truth.values.real, -real_limit, real_limit, real_cmap)
    for name, pred in predictions.items():
        save(name, pred.real, -real_limit, real_limit, real_cmap)
        save(f"{name}-error", errors[name], 0.0, error_vmax, error_cmap)

    cell = record.grid.cell_area
    return RenderResult(
        paths=paths,
        real_limit=real_limit,
        error_limit=error_limit,
        error_sums={name: float(e.sum() * cell) for name, e in errors.items()},
    )


@dataclass(frozen=True, slots=True)
class ExperimentReport:
    """Content of the HTML report of an `assemble-eval` run."""

    title: str
    rows: Sequence[ScalingRow]
    figures: Sequence[Path]
    """Figure paths relative to the report."""
    metrics: Sequence[MetricsRecord] = field(default_factory=tuple)


def report_context(report: ExperimentReport) -> dict[str, Any]:
    """
    Template context of `report`.

    Besides the report's fields, the context holds `best`, the scaling row with the lowest mean
    Rel-L2 (`None` without rows). Figures become POSIX paths for use in `src` attributes.
    """
    return {
        "title": report.title,
        "rows": list(report.rows),
        "best": min(report.rows, key=lambda r: r.mean_rel_l2, default=None),
        "figures": [f.as_posix() for f in report.figures],
        "metrics": list(report.metrics),
    }


_environment: Environment | None = None


def report_environment() -> Environment:
    """The shared Jinja environment of the packaged templates."""
    global _environment
    if _environment is None:
        _environment = Environment(
            loader=PackageLoader("helmsplit", "templates"),
            autoescape=select_autoescape(("html", "jinja")),
            keep_trailing_newline=True,
        )

    return _environment


def render_report(
    report: ExperimentReport,
    path: Path,
    *,
    template: str = "report.html.jinja",
    make_context: Callable[[ExperimentReport], dict[str, Any]] = report_context,
) -> Path:
    """
    Renders `report` through a packaged template into `path`.

    Arguments:
        report: The report to render.
        path: Output HTML file.
        template: Template name in the package's `templates` directory.
        make_context: Context factory.
    """
    html = report_environment().get_template(template).render(**make_context(report))
    path.write_text(html, encoding="utf-8")
    return path
