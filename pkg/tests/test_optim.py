import numpy as np
import pytest

from spurscope.autodiff import Tensor
from spurscope.optim import OptimizerState, optimizer_step


def _p(v):
    return {"p": Tensor(np.array([v], dtype=np.float64), requires_grad=True)}


def test_sgd_step():
    params = _p(1.0)
    optimizer_step(OptimizerState("sgd", lr=0.1), params, {"p": np.array([1.0])})
    assert params["p"].data[0] == pytest.approx(0.9)


def test_adam_zero_grad_keeps_param():
    params = _p(1.0)
    optimizer_step(OptimizerState("adam", lr=0.01), params, {"p": np.array([0.0])})
    assert params["p"].data[0] == 1.0


def test_adam_first_step_moves_by_lr():
    params = _p(1.0)
    optimizer_step(OptimizerState("adam", lr=0.01), params, {"p": np.array([1.0])})
    assert params["p"].data[0] == pytest.approx(0.99, abs=1e-6)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step(OptimizerState("sgd"), _p(1.0), {"p": np.ones(2)})


def test_unknown_kind():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")
