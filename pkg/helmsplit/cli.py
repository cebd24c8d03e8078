"""
Command line interface: `helmsplit generate | train | assemble-eval | render | verify`.

Every command writes a `config.resolved.json` snapshot next to its outputs. Feeding the
snapshot back through `--config` reproduces the run.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, write_snapshot
from .dataset import DatasetReader, DatasetRecord, GenerationSummary, generate_dataset, read_dataset
from .errors import ConfigError, HelmsplitError
from .models import HybridModel, Network, build_model
from .report import (
    ExperimentReport,
    RenderResult,
    ScalingRow,
    plot_history,
    plot_scaling,
    render_report,
    render_sample,
    write_scaling_csv,
)
from .tasks import TaskKind, TaskSpec, get_task
from .training import (
    MetricsRecord,
    NetworkPredictor,
    TrainHistory,
    assemble_hybrid,
    evaluate,
    split_dataset,
    train_task,
)
from .typing import ComplexArray, Predictor
from .verify import CheckResult, run_checks

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
EVAL_DIR = "eval"
HISTORY_NAME = "history.csv"

_SWEEP_RUNS = (
    ("fno", TaskKind.SMOOTH),
    ("vit", TaskKind.RESIDUAL),
    ("fno", TaskKind.SHARP),
    ("vit", TaskKind.SHARP),
)


def run_name(model: str, task: TaskKind | str, size_index: int) -> str:
    """Directory name of a training run, for example `fno-smooth-0`."""
    return f"{model}-{TaskKind(task).value}-{size_index}"


def _checkpoint(config: ExperimentConfig, name: str) -> Path:
    return config.paths.output / name / CHECKPOINT_NAME


def _check_grid(model: Network, config: ExperimentConfig, origin: Path) -> None:
    if model.grid_shape != config.solver_grid().shape:
        raise ConfigError(f"Checkpoint {origin} was trained on a {model.grid_shape} grid.")


def cmd_generate(config: ExperimentConfig, n_samples: int, out_path: Path) -> GenerationSummary:
    """Generates `n_samples` records of the configured experiment into `out_path`."""
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_snapshot(config, out_path.parent)
    summary = generate_dataset(config.generation_plan(), n_samples, out_path, workers=config.workers)
    if summary.rejected:
        logger.warning("%d of %d samples were rejected.", len(summary.rejected), n_samples)

    return summary


def _background_predictor(config: ExperimentConfig, task: TaskKind, size_index: int) -> Predictor | None:
    if task != TaskKind.RESIDUAL or not config.background_from_fno:
        return None

    path = _checkpoint(config, run_name("fno", TaskKind.SMOOTH, size_index))
    if not path.exists():
        raise ConfigError(f"Training on predicted backgrounds needs the smooth-task FNO at {path}.")

    return NetworkPredictor(load_checkpoint(path))


def cmd_train(
    config: ExperimentConfig,
    task: TaskKind | str,
    model: str,
    size_index: int,
    *,
    dataset_path: Path | None = None,
) -> Path:
    """
    Trains one sweep member on one task and writes its run directory.

    Returns:
        The run directory with the checkpoint, the history, the test metrics and the
        configuration snapshot.

    Raises:
        ConfigError: If the model kind or the size index is invalid.
        MissingFieldError: If the dataset lacks a field the task needs.
    """
    spec = get_task(task)
    if model == "fno":
        net_config = config.sweep.fno(config.fno, size_index)
    elif model == "vit":
        net_config = config.sweep.vit(config.vit, size_index)
    else:
        raise ConfigError(f"Unknown model kind: {model}")

    records = read_dataset(config.paths.dataset if dataset_path is None else dataset_path)
    grid_shape = records[0].grid.shape
    net = build_model(
        model,  # type: ignore[arg-type]
        net_config,
        spec.in_channels,
        grid_shape,
        seed=config.train.seed,
    )
    splits = split_dataset(len(records), seed=config.train.seed)
    background = _background_predictor(config, spec.kind, size_index)
    trained, history = train_task(
        spec, net, records, config.train, splits=splits, background_predictor=background
    )

    name = run_name(model, spec.kind, size_index)
    run_dir = config.paths.output / name
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, run_dir / CHECKPOINT_NAME)
    _write_history(history, run_dir)
    test = [records[i] for i in splits[2]]
    if test:
        metrics = evaluate(
            NetworkPredictor(trained, spec), test, spec, name=name, record_timing=config.train.record_timing
        )
        metrics.write(run_dir / "metrics.txt")

    write_snapshot(config, run_dir)
    logger.info("Run %s written to %s.", name, run_dir)
    return run_dir


def _write_history(history: TrainHistory, run_dir: Path) -> None:
    history.write_csv(run_dir / HISTORY_NAME)
    history.write_provenance(run_dir / "history.json")


def _test_split(config: ExperimentConfig, records: Sequence[DatasetRecord]) -> list[DatasetRecord]:
    _, _, test = split_dataset(len(records), seed=config.train.seed)
    return [records[i] for i in test]


def _hybrid(
    config: ExperimentConfig,
    fno_path: Path,
    vit_path: Path,
    records: Sequence[DatasetRecord] | None = None,
) -> HybridModel:
    fno, vit = load_checkpoint(fno_path), load_checkpoint(vit_path)
    _check_grid(fno, config, fno_path)
    _check_grid(vit, config, vit_path)
    fine_tune = config.fine_tune_hybrid and records is not None
    return assemble_hybrid(
        fno,
        vit,
        config.mollifier(),
        fine_tune=fine_tune,
        dataset=records,
        cfg=config.train,
        splits=split_dataset(len(records), seed=config.train.seed) if fine_tune and records else None,
    )


def _sharp_baselines(config: ExperimentConfig, sharp: TaskSpec) -> list[tuple[str, str, Predictor]]:
    found: list[tuple[str, str, Predictor]] = []
    for i in config.sweep.diagonal:
        for kind in ("fno", "vit"):
            name = run_name(kind, TaskKind.SHARP, i)
            path = _checkpoint(config, name)
            if not path.exists():
                logger.warning("Skipping baseline %s, missing %s.", name, path)
                continue

            net = load_checkpoint(path)
            _check_grid(net, config, path)
            found.append((name, kind, NetworkPredictor(net, sharp)))

    if not found:
        logger.warning("No sharp-task baselines found under %s.", config.paths.output)
    return found


def _tuned_branches(config: ExperimentConfig, name: str) -> tuple[Path, Path]:
    """Checkpoints of the fine-tuned branches of hybrid `name`."""
    hybrid_dir = config.paths.output / EVAL_DIR / name
    return hybrid_dir / "fno.ckpt", hybrid_dir / "vit.ckpt"


def _save_tuned(config: ExperimentConfig, name: str, hybrid: HybridModel) -> None:
    fno_path, vit_path = _tuned_branches(config, name)
    fno_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(hybrid.fno, fno_path)
    save_checkpoint(hybrid.vit, vit_path)


def _history_figures(config: ExperimentConfig, out_dir: Path) -> list[Path]:
    figures: list[Path] = []
    for i in config.sweep.diagonal:
        for model, task in _SWEEP_RUNS:
            name = run_name(model, task, i)
            path = config.paths.output / name / HISTORY_NAME
            if path.exists():
                history = TrainHistory.read_csv(path, config.train, task)
                figures.append(plot_history(history, out_dir / f"history-{name}.png", title=name))

    return figures


def cmd_assemble_and_eval(
    config: ExperimentConfig,
    fno_ckpt: Path | None = None,
    vit_ckpt: Path | None = None,
    *,
    dataset_path: Path | None = None,
) -> list[ScalingRow]:
    """
    Evaluates hybrids and the sharp-task baselines on the sharp test split.

    Without explicit checkpoints, every diagonal pair `(fno-smooth-i, vit-residual-i)` of the
    sweep is assembled. With them, the single hybrid is named `hybrid`. Either way the hybrids
    are compared with the `fno-sharp-i` and `vit-sharp-i` runs of the sweep. Missing runs are
    skipped with a warning.

    Writes `scaling.csv`, the scaling figures, training curves of the sweep runs, per-model
    metrics and `report.html` into `<output>/eval`. Fine-tuned hybrids also keep their branches
    in `<output>/eval/<name>`.

    Raises:
        ConfigError: If no model could be evaluated or a checkpoint does not match the grid.
    """
    records = read_dataset(config.paths.dataset if dataset_path is None else dataset_path)
    test = _test_split(config, records)
    sharp = get_task(TaskKind.SHARP)
    timing = config.train.record_timing

    pairs: list[tuple[str, Path, Path]] = []
    if fno_ckpt is not None and vit_ckpt is not None:
        pairs.append(("hybrid", fno_ckpt, vit_ckpt))
    elif fno_ckpt is not None or vit_ckpt is not None:
        raise ConfigError("Pass both the FNO and the transformer checkpoint, or neither.")
    else:
        for i in config.sweep.diagonal:
            fno_path = _checkpoint(config, run_name("fno", TaskKind.SMOOTH, i))
            vit_path = _checkpoint(config, run_name("vit", TaskKind.RESIDUAL, i))
            if fno_path.exists() and vit_path.exists():
                pairs.append((f"hybrid-{i}", fno_path, vit_path))
            else:
                logger.warning("Skipping hybrid %d, missing %s or %s.", i, fno_path, vit_path)

    candidates: list[tuple[str, str, Predictor]] = []
    for name, fno_path, vit_path in pairs:
        hybrid = _hybrid(config, fno_path, vit_path, records)
        if config.fine_tune_hybrid:
            _save_tuned(config, name, hybrid)
        candidates.append((name, "hybrid", hybrid))
    candidates.extend(_sharp_baselines(config, sharp))

    if not candidates:
        raise ConfigError(f"No trained models found under {config.paths.output}.")

    out_dir = config.paths.output / EVAL_DIR
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[ScalingRow] = []
    metrics: list[MetricsRecord] = []
    for name, architecture, predictor in candidates:
        record = evaluate(predictor, test, sharp, name=name, record_timing=timing)
        record.write(out_dir / f"metrics-{name}.txt")
        metrics.append(record)
        rows.append(ScalingRow.from_metrics(record, architecture))
        logger.info("%s: mean Rel-L2 %.4e with %d parameters.", name, record.mean_rel_l2, record.params)

    write_scaling_csv(rows, out_dir / "scaling.csv")
    figures = [plot_scaling(rows, out_dir / "scaling.png")]
    for architecture in sorted({r.architecture for r in rows}):
        path = out_dir / f"scaling-{architecture}.png"
        figures.append(plot_scaling(rows, path, architectures={architecture}))
    figures.extend(_history_figures(config, out_dir))

    report = ExperimentReport(
        title="Sharp-task scaling",
        rows=rows,
        figures=[f.relative_to(out_dir) for f in figures],
        metrics=metrics,
    )
    render_report(report, out_dir / "report.html")
    write_snapshot(config, out_dir)
    return rows


def _sharp_prediction(config: ExperimentConfig, name: str, record: DatasetRecord) -> ComplexArray:
    if name.startswith("hybrid-"):
        if config.fine_tune_hybrid:
            fno_path, vit_path = _tuned_branches(config, name)
            if not (fno_path.exists() and vit_path.exists()):
                raise ConfigError(f"No fine-tuned {name} found, run assemble-eval first.")
        else:
            i = int(name.removeprefix("hybrid-"))
            fno_path = _checkpoint(config, run_name("fno", TaskKind.SMOOTH, i))
            vit_path = _checkpoint(config, run_name("vit", TaskKind.RESIDUAL, i))
        return _hybrid(config, fno_path, vit_path).predict([record])[0]

    path = _checkpoint(config, name)
    net = load_checkpoint(path)
    if net.task != TaskKind.SHARP:
        raise ConfigError(f"Model {name} does not predict the total field.")

    return NetworkPredictor(net).predict([record])[0]


def cmd_render(
    config: ExperimentConfig,
    sample_id: int,
    models: Sequence[str],
    out_dir: Path,
    *,
    dataset_path: Path | None = None,
) -> RenderResult:
    """
    Renders the ground truth, the predictions of `models` and their error maps for one sample.

    Model names are run names of sharp-task models (for example `fno-sharp-0`), `hybrid-<i>`
    for the hybrid of sweep size `i`, or `truth`.
    With `fine_tune_hybrid`, hybrids use the branches saved by `assemble-eval`.

    Raises:
        ConfigError: If a model does not predict the total field.
        KeyError: If no record has `sample_id`.
    """
    record = DatasetReader(config.paths.dataset if dataset_path is None else dataset_path).find(sample_id)
    predictions = {
        name: record.require("p").values if name == "truth" else _sharp_prediction(config, name, record)
        for name in models
    }
    result = render_sample(record, predictions, out_dir)
    write_snapshot(config, out_dir)
    return result


def cmd_verify(
    config: ExperimentConfig,
    out_dir: Path,
    *,
    quick: bool = False,
    superposition_samples: int = 100,
) -> list[CheckResult]:
    """Runs the verification suite and writes `verify.txt` into `out_dir`."""
    results = run_checks(config.generation_plan(), superposition_samples=superposition_samples, quick=quick)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "verify.txt").write_text("\n".join(r.describe() for r in results) + "\n", encoding="utf-8")
    write_snapshot(config, out_dir)
    return results


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="TOML or JSON experiment configuration.")
    common.add_argument("--seed", type=int, default=None, help="Override the master seed.")
    common.add_argument("--out", type=Path, default=None, help="Override the output directory.")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")

    parser = argparse.ArgumentParser(prog="helmsplit", description=__doc__.strip().splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="Generate a dataset.")
    generate.add_argument("--n-samples", type=int, default=None)
    generate.add_argument("--dataset", type=Path, default=None)

    train = commands.add_parser("train", parents=[common], help="Train one model on one task.")
    train.add_argument("--task", choices=[t.value for t in TaskKind], required=True)
    train.add_argument("--model", choices=("fno", "vit"), required=True)
    train.add_argument("--size-index", type=int, default=0)
    train.add_argument("--dataset", type=Path, default=None)

    evaluate_ = commands.add_parser(
        "assemble-eval", parents=[common], help="Evaluate hybrids and baselines."
    )
    evaluate_.add_argument("--fno", type=Path, default=None, help="Smooth-task FNO checkpoint.")
    evaluate_.add_argument("--vit", type=Path, default=None, help="Residual-task transformer checkpoint.")
    evaluate_.add_argument("--dataset", type=Path, default=None)

    render = commands.add_parser("render", parents=[common], help="Render predictions of one sample.")
    render.add_argument("--sample-id", type=int, required=True)
    render.add_argument("--models", nargs="+", default=["truth"])
    render.add_argument("--dataset", type=Path, default=None)

    verify = commands.add_parser("verify", parents=[common], help="Run the verification suite.")
    verify.add_argument("--quick", action="store_true", help="Fewer samples for the statistical checks.")
    verify.add_argument("--samples", type=int, default=100, help="Superposition samples.")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config).with_overrides(seed=args.seed, output=args.out)
        output = config.paths.output
        if args.command == "generate":
            n = config.n_samples if args.n_samples is None else args.n_samples
            dataset = config.paths.dataset if args.dataset is None else args.dataset
            summary = cmd_generate(config, n, dataset)
            return 0 if not summary.rejected else 1
        if args.command == "train":
            cmd_train(config, args.task, args.model, args.size_index, dataset_path=args.dataset)
            return 0
        if args.command == "assemble-eval":
            cmd_assemble_and_eval(config, args.fno, args.vit, dataset_path=args.dataset)
            return 0
        if args.command == "render":
            cmd_render(config, args.sample_id, args.models, output / "render", dataset_path=args.dataset)
            return 0

        results = cmd_verify(
            config, output / "verify", quick=args.quick, superposition_samples=args.samples
        )
        return 0 if all(r.passed for r in results) else 1
    except (HelmsplitError, KeyError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
