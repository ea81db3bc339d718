import numpy as np
import pytest

from gdaflow.diffmath import finite_diff_check
from gdaflow.diffmath.mlp import (
    MlpSpec,
    ParamVector,
    init_params,
    mlp_forward,
    mlp_jvp,
    mlp_layout,
    unpack,
)
from gdaflow.diffmath.tensor import Tensor
from gdaflow.errors import GdaFlowError


def test_layout_size_and_slot_order():
    spec = MlpSpec.build(3, (4,), 2)
    layout = mlp_layout(spec)
    assert layout.size == 4 * 3 + 4 + 2 * 4 + 2
    assert [(s.layer, s.kind) for s in layout.slots] == [
        ("dense0", "weight"),
        ("dense0", "bias"),
        ("dense1", "weight"),
        ("dense1", "bias"),
    ]


def test_locate_inverts_flat_index():
    layout = mlp_layout(MlpSpec.build(3, (4,), 2))
    flat = layout.flat_index("dense1", "weight", (1, 2))
    assert layout.locate(flat) == ("dense1", "weight", (1, 2))


def test_batch_norm_running_statistics_are_not_trainable():
    spec = MlpSpec.build(2, (5,), 3, activation="relu", batch_norm=True)
    layout = mlp_layout(spec)
    mask = layout.trainable_mask()
    assert layout.size - int(mask.sum()) == 2 * 5
    params = init_params(spec, np.random.default_rng(0))
    np.testing.assert_array_equal(params.view("norm", "running_var"), np.ones(5))


def test_single_vector_input_returns_vector():
    spec = MlpSpec.build(3, (4,), 2)
    params = init_params(spec, np.random.default_rng(0))
    out = mlp_forward(spec, params, np.zeros(3))
    assert out.shape == (2,)


def test_wrong_feature_count_is_rejected():
    spec = MlpSpec.build(3, (4,), 2)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(GdaFlowError) as exc:
        mlp_forward(spec, params, np.zeros((5, 2)))
    assert exc.value.code == "SHAPE_MISMATCH"


def test_dropout_training_needs_rng():
    spec = MlpSpec.build(2, (4,), 2, dropout=0.5)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(GdaFlowError):
        mlp_forward(spec, params, np.zeros((3, 2)), training=True)


def test_param_vector_validation():
    layout = mlp_layout(MlpSpec.build(1, (), 1))
    with pytest.raises(GdaFlowError) as exc:
        ParamVector(np.zeros(5), layout)
    assert exc.value.code == "SHAPE_MISMATCH"
    with pytest.raises(GdaFlowError) as exc:
        ParamVector(np.array([np.nan, 0.0]), layout)
    assert exc.value.code == "NON_FINITE"


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_jvp_matches_finite_differences_of_forward(activation):
    spec = MlpSpec.build(3, (5, 4), 2, activation=activation)
    params = init_params(spec, np.random.default_rng(4))
    x = np.random.default_rng(5).normal(size=(4, 3))
    y, jac = mlp_jvp(spec, unpack(spec, params), Tensor(x), 2)
    assert jac.shape == (4, 2, 2)
    np.testing.assert_allclose(y.data, mlp_forward(spec, params, x).data)
    h = 1e-6
    for i in range(2):
        step = np.zeros(3)
        step[i] = h
        numeric = (
            mlp_forward(spec, params, x + step).data - mlp_forward(spec, params, x - step).data
        ) / (2 * h)
        np.testing.assert_allclose(jac.data[:, :, i], numeric, atol=1e-7)


def test_jvp_is_differentiable_in_the_weights():
    spec = MlpSpec.build(3, (5,), 2, activation="tanh")
    params = init_params(spec, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(3, 3))

    def trace_sum(theta: Tensor) -> Tensor:
        _, jac = mlp_jvp(spec, unpack(spec, theta), Tensor(x), 2)
        return (jac * np.eye(2)).sum()

    assert finite_diff_check(trace_sum, params).max_rel_error < 1e-6


def test_jvp_rejects_batch_norm():
    spec = MlpSpec.build(2, (3,), 2, batch_norm=True)
    params = init_params(spec, np.random.default_rng(0))
    with pytest.raises(GdaFlowError):
        mlp_jvp(spec, unpack(spec, params), Tensor(np.zeros((1, 2))), 2)


def _params_from(spec: MlpSpec, **arrays: np.ndarray) -> ParamVector:
    """Pack ``dense0_weight=..., dense0_bias=...`` style keywords into a flat vector."""

    layout = mlp_layout(spec)
    values = np.zeros(layout.size)
    for name, array in arrays.items():
        layer, kind = name.rsplit("_", 1)
        slot = layout.slot(layer, kind)
        values[slot.start : slot.stop] = np.asarray(array, dtype=np.float64).reshape(-1)
    return ParamVector(values, layout)


def test_identity_network_returns_its_input():
    spec = MlpSpec.build(2, (), 2)
    params = _params_from(spec, dense0_weight=np.eye(2))
    out = mlp_forward(spec, params, np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_hand_computed_linear_layer():
    spec = MlpSpec.build(2, (), 2)
    params = _params_from(spec, dense0_weight=[[2.0, 0.0], [0.0, 3.0]], dense0_bias=[1.0, 1.0])
    out = mlp_forward(spec, params, np.array([[1.0, 1.0]]))
    np.testing.assert_allclose(out.data, [[3.0, 4.0]])


def test_tanh_network_matches_a_plain_numpy_forward_pass():
    spec = MlpSpec.build(2, (16,), 2, activation="tanh")
    rng = np.random.default_rng(8)
    w0, b0 = rng.normal(size=(16, 2)), rng.normal(size=16)
    w1, b1 = rng.normal(size=(2, 16)), rng.normal(size=2)
    params = _params_from(spec, dense0_weight=w0, dense0_bias=b0, dense1_weight=w1, dense1_bias=b1)
    x = rng.normal(size=(6, 2))
    expected = np.tanh(x @ w0.T + b0) @ w1.T + b1
    np.testing.assert_allclose(mlp_forward(spec, params, x).data, expected, rtol=1e-12)
