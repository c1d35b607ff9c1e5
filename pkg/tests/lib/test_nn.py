import numpy as np
import pytest

from ravenforge.errors import ShapeError
from ravenforge.lib.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Module
from ravenforge.lib.tensor import Tensor


class TinyNet(Module):
    def __init__(self, rng):
        self.conv = Conv2d(1, 2, 3, rng, stride=2, padding=1)
        self.norms = [BatchNorm2d(2)]
        self.up = ConvTranspose2d(2, 1, 3, rng, stride=2, padding=1, output_padding=1)
        self.head = Dense(4, 3, rng)

    def forward(self, x):
        h = self.norms[0](self.conv(x))
        return self.up(h)


def test_state_dict_keys_are_stable(rng):
    net = TinyNet(rng)
    assert list(net.state_dict()) == [
        "conv.weight",
        "conv.bias",
        "norms.0.gamma",
        "norms.0.beta_shift",
        "up.weight",
        "up.bias",
        "head.weight",
        "head.bias",
        "norms.0.running.mean",
        "norms.0.running.var",
    ]


def test_load_state_dict_copies_values(rng):
    source, target = TinyNet(rng), TinyNet(rng)
    source.norms[0].running.mean[...] = 0.5
    target.load_state_dict(source.state_dict())
    for name, values in source.state_dict().items():
        np.testing.assert_array_equal(target.state_dict()[name], values)


def test_load_state_dict_rejects_missing_and_misshapen(rng):
    net = TinyNet(rng)
    state = net.state_dict()
    with pytest.raises(ShapeError):
        net.load_state_dict({k: v for k, v in state.items() if k != "conv.bias"})
    with pytest.raises(ShapeError):
        net.load_state_dict({**state, "conv.bias": np.zeros(5)})


def test_train_and_eval_propagate(rng):
    net = TinyNet(rng)
    net.eval()
    assert not net.norms[0].training
    net.train()
    assert net.norms[0].training


def test_eval_mode_leaves_buffers_alone(rng):
    net = TinyNet(rng).eval()
    before = {k: v.copy() for k, v in net.named_buffers().items()}
    net(Tensor(rng.random((3, 1, 8, 8))))
    for name, values in net.named_buffers().items():
        np.testing.assert_array_equal(values, before[name])


def test_upsampling_restores_resolution(rng):
    out = TinyNet(rng)(Tensor(rng.random((2, 1, 8, 8))))
    assert out.shape == (2, 1, 8, 8)


def test_requires_grad_toggle(rng):
    net = TinyNet(rng).requires_grad_(False)
    assert not any(p.requires_grad for p in net.parameters())
