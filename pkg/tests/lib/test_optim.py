import numpy as np
import pytest

from ravenforge.errors import ParameterError, ShapeError
from ravenforge.lib.optim import Adam, AdamState, adam_step
from ravenforge.lib.tensor import Tensor, backward, precision


def test_first_step_moves_by_learning_rate():
    # With bias correction the first update is lr * sign(grad), up to epsilon.
    with precision("float64"):
        w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        state = AdamState.fresh([w], lr=0.1)
        adam_step([w], [np.array([0.5, -4.0, 0.0])], state)
    np.testing.assert_allclose(w.data, [0.9, -1.9, 3.0], atol=1e-6)
    assert state.step_count == 1


def test_matches_reference_update():
    with precision("float64"):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=4), requires_grad=True)
        state = AdamState.fresh([w], lr=0.01)
        reference = w.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.normal(size=4)
            adam_step([w], [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            reference -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(w.data, reference, rtol=1e-12)


def test_replaces_parameter_arrays():
    w = Tensor(np.ones(2), requires_grad=True)
    before = w.data
    adam_step([w], [np.ones(2)], AdamState.fresh([w]))
    assert w.data is not before
    np.testing.assert_array_equal(before, np.ones(2))


def test_rejects_misaligned_gradients():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([w], [np.ones(3)], AdamState.fresh([w]))
    with pytest.raises(ShapeError):
        adam_step([w], [], AdamState.fresh([w]))


def test_rejects_bad_hyperparameters():
    with pytest.raises(ParameterError):
        AdamState(lr=0.0)
    with pytest.raises(ParameterError):
        AdamState(beta1=1.0)


def test_minimizes_a_quadratic():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    optimizer = Adam([w], lr=0.1)
    for _ in range(300):
        optimizer.zero_grad()
        backward((w * w).sum())
        optimizer.step()
    np.testing.assert_allclose(w.data, 0.0, atol=0.1)
