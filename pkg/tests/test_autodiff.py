import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advasr import autodiff as ad
from advasr.autodiff import NumericDomainError, ShapeError, Tape, TapeError, Tensor
from advasr.gradcheck import check_gradients, numerical_grad


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_matmul_identity_and_hand_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_against_finite_differences():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor(np.eye(2))
    numeric = numerical_grad(lambda: ad.tsum(ad.matmul(a, b)).item(), [a], step=1e-6)[0]
    np.testing.assert_allclose(numeric, np.ones((2, 2)), atol=1e-8)
    with Tape() as tape:
        loss = ad.tsum(ad.matmul(a, b))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, numeric, atol=1e-8)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_elementwise_values():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.tanh(Tensor(0.0)).item() == 0.0


def test_sigmoid_derivative_at_zero():
    x = leaf(0.0)
    with Tape() as tape:
        y = ad.sigmoid(x)
    tape.backward(y)
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    numeric = numerical_grad(lambda: ad.sigmoid(x).item(), [x])[0]
    assert numeric == pytest.approx(0.25, abs=1e-9)


def test_log_domain_error():
    with pytest.raises(NumericDomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(NumericDomainError):
        ad.log(Tensor(-2.0))
    with pytest.raises(NumericDomainError):
        ad.exp(Tensor(1000.0))


def test_broadcast_restricted():
    ad.add(Tensor(np.ones(3)), 2.0)
    ad.mul(Tensor(np.ones((2, 2))), Tensor(3.0))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


def test_log_softmax_uniform_and_stable():
    lp = ad.log_softmax(Tensor([[0.0, 0.0]])).data
    np.testing.assert_allclose(lp, np.log([[0.5, 0.5]]))
    lp = ad.log_softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(lp))
    assert lp[0, 0] == pytest.approx(0.0, abs=1e-300)
    assert lp[0, 1] == pytest.approx(-1000.0)


def test_log_softmax_nll_gradient_is_softmax_minus_onehot():
    z = leaf([[0.0, 0.0]])
    with Tape() as tape:
        nll = ad.neg(ad.tsum(ad.mul(ad.log_softmax(z), Tensor([[1.0, 0.0]]))))
    tape.backward(nll)
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]])


def test_backward_sum_and_square():
    x = leaf(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        loss = ad.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x = leaf([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_contract_errors():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(x, 2.0))
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)
    tape.reset()
    with tape:
        loss = ad.tsum(ad.mul(x, 3.0))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])


def test_unreachable_leaf_gets_zero_grad():
    x, y = leaf([1.0, 2.0]), leaf([5.0])
    with Tape() as tape:
        ad.mul(y, 2.0)  # recorded but not part of the loss
        loss = ad.tsum(x)
    tape.backward(loss)
    np.testing.assert_array_equal(y.grad, [0.0])


def test_fan_out_accumulates():
    x = leaf([3.0])
    with Tape() as tape:
        loss = ad.tsum(ad.add(ad.mul(x, x), ad.tanh(x)))
    tape.backward(loss)
    assert x.grad[0] == pytest.approx(6.0 + 1 - np.tanh(3.0) ** 2)


def test_no_recording_outside_tape():
    x = leaf([1.0])
    y = ad.mul(x, 2.0)
    assert y.is_leaf and not y.requires_grad


def test_shape_is_immutable():
    x = Tensor(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        x.data = np.zeros(4)


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    r1 = ad.tanh(ad.matmul(Tensor(a), Tensor(b))).data
    r2 = ad.tanh(ad.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


UNARY = {
    "tanh": ad.tanh, "sigmoid": ad.sigmoid, "exp": ad.exp, "neg": ad.neg,
    "log_sigmoid": ad.log_sigmoid,
    "log": lambda x: ad.log(ad.add(ad.mul(x, x), 0.5)),
    "log_softmax": ad.log_softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_unary_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.uniform(-2, 2, size=(3, 4)))
    w = Tensor(rng.normal(size=(3, 4)))
    ok, worst = check_gradients(lambda: ad.tsum(ad.mul(UNARY[name](x), w)), [x])
    assert ok, worst


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(-2, 2, size=(2, 3, 4)))
    w = leaf(rng.uniform(-2, 2, size=(4, 3)))
    b = leaf(rng.uniform(-2, 2, size=3))
    c = leaf(rng.uniform(-2, 2, size=(2, 3, 3)))

    def build():
        h = ad.tanh(ad.add_bias(ad.matmul(a, w), b))
        h = ad.concat([ad.mul(h, c), ad.sigmoid(h)], axis=-1)
        h = ad.take(h, [1, 0, 1], axis=0)
        pooled = ad.masked_mean(h, np.array([3, 2, 1]))
        return ad.tsum(ad.log_softmax(ad.mul(pooled, pooled)))

    ok, worst = check_gradients(build, [a, w, b, c])
    assert ok, worst


@given(seed=st.integers(0, 2 ** 31 - 1), stride=st.integers(1, 3))
@settings(max_examples=20, deadline=None)
def test_conv1d_op_gradient(seed, stride):
    rng = np.random.default_rng(seed)
    x = leaf(rng.uniform(-2, 2, size=(2, 9, 3)))
    w = leaf(rng.uniform(-1, 1, size=(3, 3, 2)))
    b = leaf(rng.uniform(-1, 1, size=2))
    g = Tensor(rng.normal(size=(2, (9 - 3) // stride + 1, 2)))
    ok, worst = check_gradients(lambda: ad.tsum(ad.mul(ad.conv1d(x, w, b, stride), g)), [x, w, b])
    assert ok, worst


@given(seed=st.integers(0, 2 ** 31 - 1), reverse=st.booleans())
@settings(max_examples=20, deadline=None)
def test_masked_lstm_op_gradient(seed, reverse):
    rng = np.random.default_rng(seed)
    H, D = 2, 3
    x = leaf(rng.uniform(-2, 2, size=(2, 4, D)))
    wx = leaf(rng.uniform(-1, 1, size=(D, 4 * H)))
    wh = leaf(rng.uniform(-1, 1, size=(H, 4 * H)))
    b = leaf(rng.uniform(-1, 1, size=4 * H))
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=float)
    g = Tensor(rng.normal(size=(2, 4, H)))
    ok, worst = check_gradients(lambda: ad.tsum(ad.mul(ad.lstm(x, wx, wh, b, mask, reverse), g)),
                                [x, wx, wh, b])
    assert ok, worst
