import numpy as np
import pytest

from ravenforge.errors import ContractError, NumericError, ParameterError, ShapeError
from ravenforge.lib.gradcheck import check_gradients
from ravenforge.lib.tensor import Tensor, backward, default_dtype, no_grad, precision


def test_backward_accumulates_into_leaves():
    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((w * w).sum())
    np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0])

    # A second pass without zeroing adds on top.
    backward((w * w).sum())
    np.testing.assert_allclose(w.grad, [4.0, 8.0, 12.0])


def test_broadcast_gradients_are_summed_back():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((x + b).sum())
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])


def test_backward_needs_a_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2.0)


def test_backward_needs_a_graph():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(1)).sum())


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        Tensor(np.array([0.0, 1.0])).log()


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = (w * 3.0).sum()
    assert not y.requires_grad
    assert y.creator is None


def test_precision_context_restores_default():
    assert default_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_unknown_precision():
    with pytest.raises(ParameterError):
        with precision("float16"):
            pass


def test_item_needs_one_value():
    with pytest.raises(ContractError):
        Tensor(np.ones(2)).item()


def test_getitem_scatters_repeated_indices():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(x[np.array([0, 0, 3])].sum())
    np.testing.assert_allclose(x.grad, [2.0, 0.0, 0.0, 1.0])


def test_accumulate_grad_checks_shape():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        x.accumulate_grad(np.ones(2))


@pytest.mark.parametrize(
    "expression",
    [
        lambda a, b: (a * b + a / b).sum(),
        lambda a, b: ((a - b) ** 2).mean(),
        lambda a, b: (a.exp() * b).sum(),
        lambda a, b: (a @ b.transpose(1, 0)).sum(),
        lambda a, b: Tensor.concat([a, b], axis=-1).reshape(-1).sum(),
        lambda a, b: (a.reshape(3, 2)[:, 1] * 2.0).sum(),
    ],
    ids=["mul_div", "pow_mean", "exp", "matmul", "concat", "reshape_getitem"],
)
def test_elementwise_gradients(expression):
    with precision("float64"):
        rng = np.random.default_rng(1)
        a = Tensor(rng.uniform(0.5, 1.5, (2, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 1.5, (2, 3)), requires_grad=True)
        errors = check_gradients(lambda: expression(a, b), {"a": a, "b": b})
    assert max(errors.values()) < 1e-6


def test_batched_matmul_gradients():
    with precision("float64"):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(4, 3, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        errors = check_gradients(lambda: ((a @ b) ** 2).sum(), {"a": a, "b": b})
    assert max(errors.values()) < 1e-6
