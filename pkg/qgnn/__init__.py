from .qg_error import ErrorCode, QGError
from .qg_handler import handler, logger
from .qg_env import ExperimentConfig
from .qg_graph import Graph, build_graph
from .qg_models import QuantMode, build_model, calibrate, forward
from .qg_train import TrainSettings, train
from .qg_inference import export, infer, load, write
from .objs import ureg

__all__ = [
    "ErrorCode",
    "QGError",
    "handler",
    "logger",
    "ExperimentConfig",
    "Graph",
    "build_graph",
    "QuantMode",
    "build_model",
    "calibrate",
    "forward",
    "TrainSettings",
    "train",
    "export",
    "infer",
    "load",
    "write",
    "ureg",
]
