"""Continuous normalizing flow over domain-time."""

from .checkpoint import dumps_flow, load_flow, loads_flow, save_flow
from .flow import (
    FlowModel,
    FlowWeights,
    TransportResult,
    draw_base,
    flow_layout,
    init_flow,
    jacobian_trace,
    log_likelihood,
    push_forward,
    sample,
    transport,
    velocity,
)
from .regularizer import (
    RegularizerSample,
    draw_taus,
    line_fit_penalty,
    regularizer_sample,
    trajectory_penalty,
)
from .train import FlowEpochRecord, FlowHistory, joint_loss, train_flow

__all__ = [
    "FlowEpochRecord",
    "FlowHistory",
    "FlowModel",
    "FlowWeights",
    "RegularizerSample",
    "TransportResult",
    "draw_base",
    "draw_taus",
    "dumps_flow",
    "flow_layout",
    "init_flow",
    "jacobian_trace",
    "joint_loss",
    "line_fit_penalty",
    "load_flow",
    "loads_flow",
    "log_likelihood",
    "push_forward",
    "regularizer_sample",
    "sample",
    "save_flow",
    "trajectory_penalty",
    "train_flow",
    "transport",
    "velocity",
]
