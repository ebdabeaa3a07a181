"""Joint 4D sparse detection and learned detection-to-track association."""
from .ablation import ablation_run
from .dataio import FormatError
from .estimator import MinkowskiTracker
from .metrics import EvalBox, MetricsReport, evaluate
from .model import ModelConfig, TrackerNet
from .nn import CheckpointError, ConfigurationError
from .pipeline import TrackerParams, run_pipeline
from .sim import SceneConfig, SceneDataset, gen_dataset, load_dataset, save_dataset
from .sparse import SparseVoxelTensor4D, TemporalStrideError
from .train import DivergenceError, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigurationError", "DivergenceError", "EvalBox", "FormatError",
    "MetricsReport", "MinkowskiTracker", "ModelConfig", "SceneConfig", "SceneDataset",
    "SparseVoxelTensor4D", "TemporalStrideError", "TrackerNet", "TrackerParams", "TrainConfig",
    "ablation_run", "evaluate", "gen_dataset", "load_dataset", "run_pipeline", "save_dataset", "train",
]
