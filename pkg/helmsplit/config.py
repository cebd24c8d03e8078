"""
Experiment configuration: one validated, immutable model per run, loaded from TOML or JSON.
"""

import json
import tomllib
from pathlib import Path

from pydantic import Field, PositiveFloat, PositiveInt, ValidationError

from .dataset import FIELD_NAMES, FieldName, GenerationPlan
from .errors import ConfigError
from .fields import Frequency, Grid2D
from .geomodel import GeomodelSpec, MollifierSpec
from .helmholtz import SolverSettings, SourceSpec
from .models import FnoConfig, VitConfig
from .training import TrainConfig
from .utils import FrozenModel

SNAPSHOT_NAME = "config.resolved.json"
"""File name of the resolved-configuration snapshot written next to every output."""


class GridSpec(FrozenModel):
    """Solver grid."""

    nx: int = Field(default=64, ge=4)
    ny: int = Field(default=64, ge=4)
    lx: PositiveFloat = 1000.0
    """Horizontal extent in meters."""
    ly: PositiveFloat = 1000.0
    """Depth extent in meters."""

    def build(self) -> Grid2D:
        return Grid2D(nx=self.nx, ny=self.ny, lx=self.lx, ly=self.ly)


class SweepSpec(FrozenModel):
    """Model sizes of the scaling study."""

    fno_layers: tuple[PositiveInt, ...] = (2, 4, 6, 8, 10)
    """FNO spectral layer counts."""

    vit_depths: tuple[PositiveInt, ...] = (2, 4, 6, 8, 10)
    """Transformer block counts."""

    def fno(self, base: FnoConfig, size_index: int) -> FnoConfig:
        """
        Raises:
            ConfigError: If `size_index` is out of range.
        """
        return base.model_copy(update={"n_layers": self._pick(self.fno_layers, size_index)})

    def vit(self, base: VitConfig, size_index: int) -> VitConfig:
        """
        Raises:
            ConfigError: If `size_index` is out of range.
        """
        return base.model_copy(update={"depth": self._pick(self.vit_depths, size_index)})

    @property
    def diagonal(self) -> range:
        """Size indices paired in the hybrid sweep."""
        return range(min(len(self.fno_layers), len(self.vit_depths)))

    @staticmethod
    def _pick(sizes: tuple[int, ...], size_index: int) -> int:
        if not 0 <= size_index < len(sizes):
            raise ConfigError(f"Size index {size_index} is outside the sweep {sizes}.")

        return sizes[size_index]


class PathsSpec(FrozenModel):
    """Input and output locations, relative paths resolve against the working directory."""

    dataset: Path = Path("data/desk.scat")
    output: Path = Path("runs")


class ExperimentConfig(FrozenModel):
    """Complete experiment configuration."""

    grid: GridSpec = GridSpec()
    frequency_hz: PositiveFloat = 9.0
    source: SourceSpec = SourceSpec()
    geomodel: GeomodelSpec = GeomodelSpec()
    solver: SolverSettings = SolverSettings()
    fno: FnoConfig = FnoConfig()
    vit: VitConfig = VitConfig()
    train: TrainConfig = TrainConfig()
    sweep: SweepSpec = SweepSpec()
    paths: PathsSpec = PathsSpec()
    seed: int = Field(default=0, ge=0)
    """Master seed of the dataset."""
    n_samples: int = Field(default=1000, ge=0)
    """Samples generated by `generate`."""
    workers: PositiveInt = 1
    """Generation processes."""
    dataset_fields: tuple[FieldName, ...] = FIELD_NAMES
    """Fields stored in generated datasets."""
    background_from_fno: bool = False
    """Train the residual task on the FNO's predicted background instead of the solver's."""
    fine_tune_hybrid: bool = False
    """Train the assembled hybrid end to end on the sharp task."""

    def solver_grid(self) -> Grid2D:
        return self.grid.build()

    def frequency(self) -> Frequency:
        return Frequency(self.frequency_hz)

    def mollifier(self) -> MollifierSpec:
        """The hybrid's mollifier, matching the generation smoothing."""
        return self.geomodel.mollifier(self.solver_grid())

    def generation_plan(self) -> GenerationPlan:
        return GenerationPlan(
            grid=self.solver_grid(),
            frequency=self.frequency(),
            source=self.source,
            geomodel=self.geomodel,
            solver=self.solver,
            master_seed=self.seed,
            fields=self.dataset_fields,
        )

    def with_overrides(self, *, seed: int | None = None, output: Path | None = None) -> "ExperimentConfig":
        """Applies command line overrides."""
        config = self
        if seed is not None:
            config = config.model_copy(update={"seed": seed})
        if output is not None:
            config = config.model_copy(update={"paths": config.paths.model_copy(update={"output": output})})

        return config


def parse_config(data: dict[str, object]) -> ExperimentConfig:
    """
    Validates raw configuration data.

    Raises:
        ConfigError: If the data is invalid or contains unknown keys.
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_config(path: Path | None) -> ExperimentConfig:
    """
    Loads a `.toml` or `.json` configuration, the defaults if `path` is `None`.

    Raises:
        ConfigError: If the file cannot be read or is invalid.
    """
    if path is None:
        return ExperimentConfig()

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read configuration {path}: {e}") from e

    try:
        if path.suffix == ".toml":
            data = tomllib.loads(text)
        elif path.suffix == ".json":
            data = json.loads(text)
        else:
            raise ConfigError(f"Unsupported configuration format: {path.suffix!r}.")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot parse configuration {path}: {e}") from e

    return parse_config(data)


def write_snapshot(config: ExperimentConfig, directory: Path) -> Path:
    """Writes the resolved configuration into `directory` and returns its path."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SNAPSHOT_NAME
    path.write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
