import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcnet import tensor as T
from dcnet.tensor import ContractError, DimensionError, Param, Tape, Tensor, backward, grad_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_selector():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(T.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]])).data, [[5.0]])


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    b = Tensor(rng.normal(size=(4, 2)))
    assert grad_check(lambda t: T.total(T.matmul(t, b)), rng.normal(size=(3, 4))) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_hand_values():
    x = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0))).data, [[[2, 4], [6, 8]]])
    np.testing.assert_array_equal(T.conv2d(x, Tensor(np.full((1, 1, 2, 2), 0.25)), stride=2).data, [[[2.5]]])


def test_conv2d_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * k[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_gradient():
    rng = np.random.default_rng(2)
    k = Tensor(rng.normal(size=(4, 3, 3, 3)))
    assert grad_check(lambda t: T.total(T.conv2d(t, k, padding=1)), rng.normal(size=(3, 8, 8))) < 1e-4


def test_activations():
    np.testing.assert_array_equal(T.clamp01(Tensor([-0.5, 0.3, 1.5])).data, [0.0, 0.3, 1.0])
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    tape = Tape()
    x = tape.leaf([0.0])
    g = backward(T.total(T.sigmoid(x)), tape)[x.node_id]
    assert abs(g[0] - 0.25) < 1e-12
    assert grad_check(lambda t: T.total(T.sigmoid(t)), np.zeros(1)) < 1e-8
    with pytest.raises(ContractError):
        T.activation(x, "tanh")


def test_log_domain():
    with pytest.raises(T.DomainError):
        T.log(Tensor([0.0, 1.0]))


def test_pool_avg():
    np.testing.assert_array_equal(T.pool_avg(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2, 2).data, [[[2.5]]])
    np.testing.assert_array_equal(T.pool_avg(Tensor(np.full((1, 4, 4), 7.0)), 2).data, np.full((1, 2, 2), 7.0))
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(2, 4, 4)))
    assert grad_check(lambda t: T.total(T.mul(T.pool_avg(t, 2), w)), rng.normal(size=(2, 8, 8))) < 1e-6


def test_fully_connected():
    x = Tensor([0.5, -1.0])
    np.testing.assert_array_equal(T.fully_connected(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    np.testing.assert_array_equal(T.fully_connected(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0]]), Tensor([3.0])).data, [6.0])
    rng = np.random.default_rng(4)
    w, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=3))
    assert grad_check(lambda t: T.total(T.sigmoid(T.fully_connected(t, w, b))), rng.normal(size=5)) < 1e-6


def test_reductions():
    x = Tensor(np.arange(4.0))
    assert T.l1_loss(x, x).item() == 0.0
    assert abs(T.l1_loss(Tensor([0.0, 0.0]), Tensor([0.2, 0.4])).item() - 0.3) < 1e-15
    tape = Tape()
    p = tape.leaf(np.random.default_rng(5).normal(size=(3, 3)))
    np.testing.assert_array_equal(backward(T.total(p), tape)[p.node_id], np.ones((3, 3)))
    with pytest.raises(ContractError):
        T.reduce(x, kind="max")


def test_backward_simple_cases():
    tape = Tape()
    p = Param(np.ones((2, 2)))
    backward(T.total(p.on(tape)), tape)
    np.testing.assert_array_equal(p.grad, np.ones((2, 2)))
    tape = Tape()
    q = Param([3.0])
    t = q.on(tape)
    backward(T.mean(T.mul(t, t)), tape)
    assert q.grad[0] == 6.0


def test_disjoint_tapes_are_isolated():
    a, b = Param([1.0, 2.0]), Param([3.0])
    t1, t2 = Tape(), Tape()
    loss1 = T.total(T.mul(a.on(t1), a.on(t1)))
    T.total(b.on(t2))
    b.zero_grad()
    backward(loss1, t1)
    assert np.all(b.grad == 0)
    np.testing.assert_array_equal(a.grad, [2.0, 4.0])


def test_mixing_tapes_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ContractError):
        T.add(t1.leaf([1.0]), t2.leaf([1.0]))


def test_detached_tensor_gets_no_gradient():
    tape = Tape()
    x = tape.leaf([2.0])
    d = x.detach()
    assert d.tape is None
    loss = T.total(T.mul(x, d))
    g = backward(loss, tape)
    assert g[x.node_id][0] == 2.0


def test_tape_order_and_gradient_shapes():
    tape = Tape()
    x = tape.leaf(np.ones((2, 3)))
    y = T.reshape(T.relu(x), (3, 2))
    z = T.total(T.matmul(y, Tensor(np.ones((2, 1)))))
    for i, node in enumerate(tape.nodes):
        assert all(src is None or src < i for src in node.inputs)
    assert backward(z, tape)[x.node_id].shape == x.shape


def test_forward_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.exp(Tensor([1000.0]))


def test_tensor_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_param_nonnegative_projection():
    p = Param([-1.0, 2.0], constraint="nonnegative")
    p.project()
    assert p.data.min() >= 0
    assert np.all(p.m == 0) and np.all(p.v == 0)


def test_grad_check_examples():
    assert grad_check(lambda t: T.total(T.mul(t, t)), np.array([3.0])) < 1e-8
    assert grad_check(lambda t: T.l1_loss(t, Tensor(np.zeros(2))), np.array([1.0, -1.0])) < 1e-6
    x = np.random.default_rng(6).normal(size=4)
    assert grad_check(lambda t: T.sigmoid(T.total(t)), x) < 1e-7


def test_grad_check_detects_wrong_gradient():
    def bad(t):
        # forward value of t^2 but a recorded gradient of zero
        return T.total(T.add(T.mul(t.detach(), t.detach()), T.scale(t, 0.0)))

    assert grad_check(bad, np.array([2.0])) >= 0.99


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_matches_numpy(a, b):
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_logsumexp_matches_numpy(a):
    ref = np.log(np.sum(np.exp(a - a.max(axis=1, keepdims=True)), axis=1)) + a.max(axis=1)
    np.testing.assert_allclose(T.logsumexp(Tensor(a), axis=1).data, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(0.1, 10)))
def test_normalizers(v):
    assert abs(np.linalg.norm(T.l2_normalize(Tensor(v)).data) - 1.0) < 1e-9
    a = T.abs_normalize(Tensor(np.stack([v, -v])), axis=1).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-8)
