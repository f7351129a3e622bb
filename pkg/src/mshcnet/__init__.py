"""Four-stream hybrid network (graph, convolutional and second-order pooling
streams) for hyperspectral pixel classification, on a small numpy autodiff core."""
from .data import HsiCube, LabelMap, SyntheticSpec, generate_synthetic
from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    GenerationError,
    MshcError,
    NumericalError,
)
from .experiments import DataConfig, RunConfig
from .graph import GraphConfig, KnnGraph, build_knn_graph
from .metrics import EvalReport, evaluate
from .model import ModelConfig, ModelState, init_state, load_checkpoint, predict, save_checkpoint
from .tensor import Tensor
from .trainer import TrainConfig, TrainReport, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "DataConfig",
    "DataError",
    "DimensionError",
    "EvalReport",
    "FormatError",
    "GenerationError",
    "GraphConfig",
    "HsiCube",
    "KnnGraph",
    "LabelMap",
    "ModelConfig",
    "ModelState",
    "MshcError",
    "NumericalError",
    "RunConfig",
    "SyntheticSpec",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "build_knn_graph",
    "evaluate",
    "generate_synthetic",
    "init_state",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train",
]
