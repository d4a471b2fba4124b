import numpy as np
import pytest

from config.settings import ModelConfig
from core.detnet import Detector
from core.errors import NumericError
from core.optimizer import AdamState, adam_update, scheduled_lr
from core.tensor import Tensor, precision
from core.training import evaluate_loss, train_step


def tiny_model() -> Detector:
    return Detector(ModelConfig(width=0.125, input_size=64, dyhead_blocks=1), seed=0)


def batch():
    rng = np.random.default_rng(0)
    images = rng.random((2, 1, 64, 64))
    targets = [np.array([[0, 0.3, 0.4, 0.06, 0.06]]), np.array([[0, 0.7, 0.2, 0.05, 0.05], [0, 0.5, 0.8, 0.08, 0.08]])]
    return images, targets


def test_adam_zero_gradient_keeps_parameters():
    tensor = Tensor(np.array([1.0, -2.0]))
    state = AdamState(lr=0.1)
    adam_update(state, {"w": tensor}, {"w": np.zeros(2)})
    assert np.array_equal(tensor.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    tensor = Tensor(np.array([0.0, 0.0, 0.0]))
    state = AdamState(lr=0.01)
    adam_update(state, {"w": tensor}, {"w": np.array([3.0, -0.2, 50.0])})
    assert np.allclose(tensor.data, [-0.01, 0.01, -0.01], atol=1e-8)


def test_adam_skips_parameters_without_gradients():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    state = AdamState()
    adam_update(state, {"a": a, "b": b}, {"a": np.ones(2)})
    assert "b" not in state.m
    assert np.array_equal(b.data, np.ones(2))


def test_adam_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        AdamState(lr=0.0)
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)


def test_lr_schedules():
    assert scheduled_lr(1e-3, "constant", 50, 100) == 1e-3
    assert scheduled_lr(1e-3, "cosine", 0, 100) == pytest.approx(1e-3)
    assert scheduled_lr(1e-3, "cosine", 100, 100) == pytest.approx(1e-5)
    assert scheduled_lr(1e-3, "cosine", 50, 100) < 1e-3
    with pytest.raises(ValueError):
        scheduled_lr(1e-3, "step", 1, 10)


def test_a_few_steps_reduce_the_loss():
    with precision("double"):
        model = tiny_model()
        images, targets = batch()
        state = AdamState(lr=1e-3)
        before = evaluate_loss(model, images, targets).total
        for _ in range(3):
            train_step(model, state, images, targets)
        after = evaluate_loss(model, images, targets).total
    assert state.step == 3
    assert after < before


def test_non_finite_batch_aborts_without_update():
    model = tiny_model()
    images, targets = batch()
    images = images.astype(np.float32)
    images[0, 0, 10, 10] = np.nan
    state = AdamState()
    before = {name: tensor.data.copy() for name, tensor in model.parameters().items()}
    with pytest.raises(NumericError):
        train_step(model, state, images, targets)
    assert state.step == 0 and not state.m
    assert all(np.array_equal(before[name], tensor.data) for name, tensor in model.parameters().items())
