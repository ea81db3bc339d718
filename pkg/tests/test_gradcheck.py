import numpy as np
import pytest

from gdaflow.diffmath import backward, finite_diff_check
from gdaflow.diffmath.mlp import MlpSpec, init_params, mlp_forward
from gdaflow.diffmath.tensor import Tensor, log, relu, softmax_cross_entropy
from gdaflow.errors import GdaFlowError


def test_mlp_cross_entropy_gradient_matches_central_differences():
    spec = MlpSpec.build(2, (6, 5), 3, activation="tanh")
    params = init_params(spec, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    x = rng.normal(size=(7, 2))
    labels = rng.integers(0, 3, size=7)

    def loss(theta: Tensor) -> Tensor:
        return softmax_cross_entropy(mlp_forward(spec, theta, x), labels)

    result = finite_diff_check(loss, params)
    assert result.max_rel_error < 1e-6
    assert result.kinks == ()
    assert result.nonfinite == ()
    assert len(result.coordinates) == len(params)


def test_kinks_are_reported_and_excluded():
    result = finite_diff_check(lambda th: relu(th).sum(), np.array([0.0, 1.0]))
    assert result.kinks == (0,)
    assert result.max_rel_error < 1e-8


def test_nonfinite_evaluations_are_reported():
    result = finite_diff_check(lambda th: log(th).sum(), np.array([1e-6]), eps=1e-5)
    assert result.nonfinite == (0,)


def test_coordinate_subset():
    result = finite_diff_check(lambda th: (th * th).sum(), np.arange(5.0), coordinates=[1, 3])
    assert result.coordinates == (1, 3)
    np.testing.assert_allclose(result.analytic, [2.0, 6.0])
    np.testing.assert_allclose(result.numeric, [2.0, 6.0], rtol=1e-8)


def test_eps_must_be_positive():
    with pytest.raises(GdaFlowError) as exc:
        finite_diff_check(lambda th: th.sum(), np.zeros(2), eps=0.0)
    assert exc.value.code == "INVALID_INPUT"


def test_backward_helper_returns_flat_gradient():
    theta = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    grad = backward((theta * theta).sum(), theta)
    np.testing.assert_array_equal(grad, [2.0, -4.0])


@pytest.mark.parametrize("seed", range(20))
def test_random_mlp_gradients_hold_across_seeds(seed):
    rng = np.random.default_rng(seed)
    spec = MlpSpec.build(3, (8, 6), 4, activation="tanh")
    params = init_params(spec, rng)
    x = rng.normal(size=(5, 3))
    labels = rng.integers(0, 4, size=5)

    def loss(theta: Tensor) -> Tensor:
        return softmax_cross_entropy(mlp_forward(spec, theta, x), labels)

    assert finite_diff_check(loss, params, eps=1e-5).max_rel_error < 1e-4
