import math

import numpy as np
import pytest

from dcnet import dnet
from dcnet import tensor as T
from dcnet.tensor import Param, Tape, Tensor, backward, grad_check

L, l = 31, 3


@pytest.fixture(scope="module")
def params():
    return dnet.DnetParams.create(np.random.default_rng(0), L, l)


def test_encoder_shapes(params):
    x = Tensor(np.random.default_rng(1).uniform(size=(L, 8, 8)))
    for which in ("common_x", "specific_x"):
        assert dnet.encode(x, which, params).shape == (dnet.C_CODE, 8, 8)
    y = Tensor(np.random.default_rng(2).uniform(size=(l, 16, 16)))
    assert dnet.encode(y, "common_y", params).shape == (dnet.C_CODE, 16, 16)
    with pytest.raises(T.ContractError):
        dnet.encode(x, "common_z", params)


def test_zero_input_gives_zero_code(params):
    code = dnet.encode(Tensor(np.zeros((L, 8, 8))), "common_x", params)
    assert np.all(code.data == 0)


def test_encoder_gradient_wrt_first_kernel():
    p = dnet.DnetParams.create(np.random.default_rng(3), 4, 2, c_code=3, hidden=4)
    x = Tensor(np.random.default_rng(4).uniform(size=(4, 5, 5)))
    stack = p.enc_common_x
    first = stack.layers[0]

    def f(t):
        h = T.relu(T.conv2d(x, t, first.bias.on(None), padding=first.padding))
        return T.mean(stack.layers[1](h))

    assert grad_check(f, first.weight.data) < 1e-4


def test_recombine_shapes_and_sensitivity(params):
    rng = np.random.default_rng(5)
    c, s = Tensor(rng.normal(size=(16, 8, 8))), Tensor(rng.normal(size=(16, 8, 8)))
    out = dnet.recombine(c, s, "gen_x", params)
    assert out.shape == (L, 8, 8)
    big = (Tensor(rng.normal(size=(16, 64, 64))), Tensor(rng.normal(size=(16, 64, 64))))
    assert dnet.recombine(*big, "gen_y", params).shape == (l, 64, 64)
    s2 = Tensor(s.data + rng.normal(size=s.shape))
    assert np.linalg.norm(dnet.recombine(c, s2, "gen_x", params).data - out.data) > 0
    with pytest.raises(T.DimensionError):
        dnet.recombine(c, Tensor(np.zeros((16, 4, 4))), "gen_x", params)


def test_discriminator_range_and_zero_head():
    p = dnet.DnetParams.create(np.random.default_rng(6), L, l)
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = dnet.discriminate(Tensor(rng.normal(size=(16, 8, 8))), p).item()
        assert 0.0 < d < 1.0
    p.disc.fc.weight.data[:] = 0.0
    p.disc.fc.bias.data[:] = 0.0
    assert dnet.discriminate(Tensor(rng.normal(size=(16, 8, 8))), p).item() == 0.5


def test_discriminator_gradient():
    p = dnet.DnetParams.create(np.random.default_rng(8), 4, 2, c_code=3, hidden=4)
    x = np.random.default_rng(9).normal(size=(3, 4, 4))
    assert grad_check(lambda t: T.total(dnet.discriminate(t, p)), x) < 1e-4


class _FixedDisc:
    """Stand-in discriminator: ``value(code)`` decides the probability."""

    def __init__(self, value):
        self.value = value

    def __call__(self, code, tape=None):
        return T.add_const(T.scale(T.total(code), 0.0), self.value(code))


class _Holder:
    def __init__(self, disc):
        self.disc = disc


def test_adversarial_uninformative():
    h = _Holder(_FixedDisc(lambda c: 0.5))
    cx, cy = Tensor(np.ones((2, 2, 2))), Tensor(np.zeros((2, 2, 2)))
    for role in ("discriminator", "encoder"):
        assert abs(dnet.adversarial_loss(cx, cy, h, role).item() - math.log(2)) < 1e-12
    assert abs(dnet.adversarial_loss(cx, cy, h, "encoder", literal=True).item() - math.log(2)) < 1e-12


def test_adversarial_perfect_discriminator():
    h = _Holder(_FixedDisc(lambda c: 1.0 if c.data.mean() > 0 else 0.0))
    cx, cy = Tensor(np.ones((2, 2, 2))), Tensor(np.zeros((2, 2, 2)))
    assert dnet.adversarial_loss(cx, cy, h, "discriminator").item() < 1e-6
    cap = -math.log(dnet.PROB_CLAMP)
    assert abs(dnet.adversarial_loss(cx, cy, h, "encoder").item() - cap) < 1e-6


def test_adversarial_shape_and_role_checks(params):
    with pytest.raises(T.DimensionError):
        dnet.adversarial_loss(Tensor(np.zeros((16, 2, 2))), Tensor(np.zeros((16, 3, 3))), params, "encoder")
    with pytest.raises(T.ContractError):
        dnet.adversarial_loss(Tensor(np.zeros((16, 2, 2))), Tensor(np.zeros((16, 2, 2))), params, "critic")


def _step_code(p, literal, seed, lr=1e-2):
    rng = np.random.default_rng(seed)
    code = Param(rng.normal(size=(16, 4, 4)))
    other = Tensor(rng.normal(size=(16, 4, 4)))
    before = dnet.discriminate(code.value, p).item()
    tape = Tape()
    loss = dnet.adversarial_loss(code.on(tape), other, p, "encoder", tape, literal=literal)
    backward(loss, tape)
    code.data -= lr * code.grad
    return before, dnet.discriminate(code.value, p).item()


def test_encoder_step_confuses_discriminator():
    for seed in range(5):
        p = dnet.DnetParams.create(np.random.default_rng(100 + seed), L, l)
        before, after = _step_code(p, True, seed)
        assert abs(after - 0.5) < abs(before - 0.5)
        before, after = _step_code(p, False, seed)
        assert after < before  # the flipped-label objective pushes D(code_x) down


def test_discriminator_role_leaves_codes_untouched():
    p = dnet.DnetParams.create(np.random.default_rng(11), L, l)
    rng = np.random.default_rng(12)
    tape = Tape()
    code = Param(rng.normal(size=(16, 4, 4)))
    loss = dnet.adversarial_loss(code.on(tape), Tensor(rng.normal(size=(16, 4, 4))), p, "discriminator", tape)
    backward(loss, tape)
    assert np.all(code.grad == 0)
    assert any(np.any(q.grad != 0) for q in p.disc.params())


def test_forward_shapes_and_residual():
    rng = np.random.default_rng(13)
    p = dnet.DnetParams.create(rng, L, l)
    x, y = rng.uniform(size=(L, 8, 8)), rng.uniform(size=(l, 64, 64))
    out = dnet.forward(x, y, p)
    assert out.x_bar.shape == (L, 8, 8) and out.y_bar.shape == (l, 64, 64)
    assert out.code_y_down.shape == out.hs.common.shape
    for layer in (p.gen_x.layers[-1], p.gen_y.layers[-1]):
        layer.weight.data[:] = 0.0
    out = dnet.forward(x, y, p)
    np.testing.assert_array_equal(out.x_bar.data, x)
    np.testing.assert_array_equal(out.y_bar.data, y)


def test_common_codes_share_channel_count(params):
    assert params.enc_common_x.c_out == params.enc_common_y.c_out == params.disc.c_in


def test_identity_start():
    rng = np.random.default_rng(14)
    p = dnet.DnetParams.create(rng, L, l).identity_start()
    x, y = rng.uniform(size=(L, 8, 8)), rng.uniform(size=(l, 64, 64))
    out = dnet.forward(x, y, p)
    np.testing.assert_array_equal(out.x_bar.data, x)
    np.testing.assert_array_equal(out.y_bar.data, y)
    with pytest.raises(T.ContractError):
        dnet.DnetParams.create(rng, L, l, residual=False).identity_start()
