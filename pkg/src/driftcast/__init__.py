"""Delay-aware, physics-guided continuous-time forecasting on sensor graphs."""

from .tensor import Tape, Tensor, forward_op, grad_check
from .graphs import (
    Graph,
    StationSet,
    build_adaptive_adjacency,
    build_advection_graph,
    build_diffusion_graph,
    haversine_km,
    neighbor_set,
)
from .dde import HistoryBuffer, rk4_step, solve_dde
from .model import ModelConfig, ModelParams, forecast, huber_loss, init_model
from .train import Adam, TrainConfig, evaluate, train_loop

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Graph",
    "HistoryBuffer",
    "ModelConfig",
    "ModelParams",
    "StationSet",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_adaptive_adjacency",
    "build_advection_graph",
    "build_diffusion_graph",
    "evaluate",
    "forecast",
    "forward_op",
    "grad_check",
    "haversine_km",
    "huber_loss",
    "init_model",
    "neighbor_set",
    "rk4_step",
    "solve_dde",
    "train_loop",
]
