"""Minimal numpy network stack: layers, parameter registry, inference net."""

from .layers import CALIBRATE, EVAL, TRAIN, ShapeError
from .model import (
    ForwardOutput,
    InferenceNet,
    NetConfig,
    cross_entropy,
    l2_normalize,
    l2_normalize_backward,
    project_bbox,
    roi_project_pool,
    softmax,
)
from .params import ParamSet, load_checkpoint, save_checkpoint

__all__ = [
    "CALIBRATE",
    "EVAL",
    "TRAIN",
    "ForwardOutput",
    "InferenceNet",
    "NetConfig",
    "ParamSet",
    "ShapeError",
    "cross_entropy",
    "l2_normalize",
    "l2_normalize_backward",
    "load_checkpoint",
    "project_bbox",
    "roi_project_pool",
    "save_checkpoint",
    "softmax",
]
