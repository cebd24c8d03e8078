from .config import ExperimentConfig as ExperimentConfig
from .config import load_config as load_config
from .dataset import DatasetReader as DatasetReader
from .dataset import DatasetRecord as DatasetRecord
from .dataset import GenerationPlan as GenerationPlan
from .dataset import generate_dataset as generate_dataset
from .dataset import read_dataset as read_dataset
from .errors import HelmsplitError as HelmsplitError
from .fields import ComplexField2D as ComplexField2D
from .fields import Frequency as Frequency
from .fields import Grid2D as Grid2D
from .fields import ScalarField2D as ScalarField2D
from .geomodel import GeomodelSpec as GeomodelSpec
from .geomodel import MollifierSpec as MollifierSpec
from .geomodel import generate_velocity_pair as generate_velocity_pair
from .helmholtz import SolverSettings as SolverSettings
from .helmholtz import SourceSpec as SourceSpec
from .helmholtz import solve_background as solve_background
from .helmholtz import solve_full as solve_full
from .helmholtz import solve_residual as solve_residual
from .models import FNO as FNO
from .models import HybridModel as HybridModel
from .models import WindowTransformer as WindowTransformer
from .models import build_model as build_model
from .tasks import TaskKind as TaskKind
from .tasks import get_task as get_task
from .training import TrainConfig as TrainConfig
from .training import assemble_hybrid as assemble_hybrid
from .training import evaluate as evaluate
from .training import train_task as train_task
from .typing import Predictor as Predictor
