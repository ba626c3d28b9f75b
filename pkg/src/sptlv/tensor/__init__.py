"""Minimal reverse-mode autodiff engine on top of numpy."""

from .engine import Graph, GraphError, Tensor, active_graph, as_tensor
from .ops import DimensionError, RunningStats
from .optim import AdamState, NumericError, adam_step, lr_plateau_decay
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Graph", "GraphError", "Tensor", "active_graph", "as_tensor",
    "DimensionError", "RunningStats",
    "AdamState", "NumericError", "adam_step", "lr_plateau_decay",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
]
