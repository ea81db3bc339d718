from __future__ import annotations

import numpy as np
import pytest

from gdaflow.cnf.flow import FlowModel, flow_layout, init_flow
from gdaflow.config import ClassifierConfig, FlowConfig, RunConfig
from gdaflow.data import DomainSequence, blobs_sequence, two_moons_sequence
from gdaflow.diffmath.mlp import MlpSpec, ParamVector


@pytest.fixture()
def tiny_flow_config() -> FlowConfig:
    return FlowConfig(hidden=(8,), steps_per_unit_time=4, epochs=2, batch_size=8, lr=1e-2)


@pytest.fixture()
def tiny_classifier_config() -> ClassifierConfig:
    return ClassifierConfig(hidden=(16,), steps=150, batch_size=32, lr=1e-2)


@pytest.fixture()
def tiny_run_config(
    tiny_flow_config: FlowConfig, tiny_classifier_config: ClassifierConfig
) -> RunConfig:
    return RunConfig(
        flow=tiny_flow_config,
        classifier=tiny_classifier_config,
        alphas=(0.5, 1.0),
        n_generate=24,
    )


@pytest.fixture()
def moons_sequence() -> DomainSequence:
    """Three domains at 0, 20 and 40 degrees, 40 points each."""

    return two_moons_sequence(40, 0.05, (0.0, 20.0, 40.0), seed=3)


@pytest.fixture()
def blobs() -> DomainSequence:
    return blobs_sequence(60, 3, 0.1, (0.0, 15.0, 30.0), seed=11)


@pytest.fixture()
def random_flow(tiny_flow_config: FlowConfig) -> FlowModel:
    return init_flow(
        2, 3.0, tiny_flow_config, np.random.default_rng(0), time_indices=(1.0, 2.0, 3.0)
    )


def linear_flow(horizon: float = 2.0, rate: float = -1.0, dim: int = 2) -> FlowModel:
    """Flow with velocity ``rate * g``: no hidden layers, time input ignored."""

    spec = MlpSpec.build(dim + 1, (), dim)
    layout = flow_layout(spec, 1)
    values = np.zeros(layout.size)
    for i in range(dim):
        values[layout.flat_index("block0.dense0", "weight", (i, i))] = rate
    return FlowModel(
        dim=dim,
        horizon=horizon,
        velocity_spec=spec,
        params=ParamVector(values, layout),
        steps_per_unit_time=16,
    )
