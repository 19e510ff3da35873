import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advasr import autodiff as ad
from advasr.autodiff import ShapeError, Tape, Tensor
from advasr.gradcheck import check_gradients
from advasr.layers import (BLSTM, FC, Conv1d, GradientReversal, LayerSpec, SequenceTooShortError,
                           SharedEncoder, blstm_forward, conv1d_forward, fc_forward, grl_apply)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("conv1d", 4, 4, kernel_width=2)
    with pytest.raises(ValueError):
        LayerSpec("fc", 0, 3)
    with pytest.raises(ValueError):
        LayerSpec("rnn", 2, 2)


def test_conv_identity_kernel_returns_interior():
    layer = Conv1d(LayerSpec("conv1d", 3, 3, kernel_width=3), rng(), activation=None)
    w = np.zeros((3, 3, 3))
    w[1] = np.eye(3)
    layer.W.data = w
    x = Tensor(rng(1).normal(size=(6, 3)))
    np.testing.assert_array_equal(conv1d_forward(x, layer).data, x.data[1:-1])


def test_conv_all_ones_hand_value():
    layer = Conv1d(LayerSpec("conv1d", 1, 1, kernel_width=3), rng(), activation=None)
    layer.W.data = np.ones((3, 1, 1))
    out = conv1d_forward(Tensor(np.ones((5, 1))), layer)
    np.testing.assert_array_equal(out.data, np.full((3, 1), 3.0))
    layer.activation = "tanh"
    np.testing.assert_allclose(conv1d_forward(Tensor(np.ones((5, 1))), layer).data, np.tanh(3.0))


def test_conv_output_length_and_too_short():
    layer = Conv1d(LayerSpec("conv1d", 2, 4, kernel_width=5, stride=2), rng())
    out = conv1d_forward(Tensor(np.ones((11, 2))), layer)
    assert out.shape == ((11 - 5) // 2 + 1, 4)
    with pytest.raises(SequenceTooShortError) as info:
        conv1d_forward(Tensor(np.ones((4, 2))), layer)
    assert info.value.length == 4 and info.value.kernel_width == 5


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_conv_gradient(seed):
    layer = Conv1d(LayerSpec("conv1d", 3, 2, kernel_width=3, stride=2), rng(seed))
    r = rng(seed + 1)
    x = Tensor(r.uniform(-2, 2, size=(9, 3)), requires_grad=True)
    g = Tensor(r.normal(size=(4, 2)))
    ok, worst = check_gradients(lambda: ad.tsum(ad.mul(conv1d_forward(x, layer), g)), [x, layer.W, layer.b])
    assert ok, worst


def test_blstm_single_step_halves_equal():
    layer = BLSTM(LayerSpec("blstm", 3, 8), rng())
    for suffix in ("Wx", "Wh", "b"):
        layer.params[f"blstm.bwd.{suffix}"].data = layer.params[f"blstm.fwd.{suffix}"].data
    out = blstm_forward(Tensor(rng(2).normal(size=(1, 3))), layer).data
    np.testing.assert_array_equal(out[:, :4], out[:, 4:])


def test_blstm_zero_weights_zero_output():
    layer = BLSTM(LayerSpec("blstm", 3, 4), rng())
    for p in layer.params.values():
        p.data = np.zeros(p.shape)
    out = blstm_forward(Tensor(rng(3).normal(size=(5, 3))), layer)
    assert out.shape == (5, 4)
    np.testing.assert_array_equal(out.data, 0.0)


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_blstm_time_reversal_swaps_halves(seed):
    layer = BLSTM(LayerSpec("blstm", 3, 6), rng(seed))
    swapped = BLSTM(LayerSpec("blstm", 3, 6), rng(seed + 1))
    for suffix in ("Wx", "Wh", "b"):
        swapped.params[f"blstm.fwd.{suffix}"].data = layer.params[f"blstm.bwd.{suffix}"].data
        swapped.params[f"blstm.bwd.{suffix}"].data = layer.params[f"blstm.fwd.{suffix}"].data
    x = rng(seed + 2).normal(size=(5, 3))
    out = blstm_forward(Tensor(x), layer).data
    rev = blstm_forward(Tensor(x[::-1].copy()), swapped).data
    np.testing.assert_array_equal(rev[::-1, :3], out[:, 3:])
    np.testing.assert_array_equal(rev[::-1, 3:], out[:, :3])


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_blstm_gradient_over_three_steps(seed):
    layer = BLSTM(LayerSpec("blstm", 2, 4), rng(seed))
    r = rng(seed + 1)
    x = Tensor(r.uniform(-2, 2, size=(3, 2)), requires_grad=True)
    g = Tensor(r.normal(size=(3, 4)))
    params = [x] + list(layer.params.values())
    ok, worst = check_gradients(lambda: ad.tsum(ad.mul(blstm_forward(x, layer), g)), params)
    assert ok, worst


def test_blstm_padded_batch_matches_single_sequences():
    layer = BLSTM(LayerSpec("blstm", 3, 4), rng())
    r = rng(5)
    a, b = r.normal(size=(6, 3)), r.normal(size=(4, 3))
    batch = np.zeros((2, 6, 3))
    batch[0], batch[1, :4] = a, b
    out, _ = layer(Tensor(batch), [6, 4])
    np.testing.assert_allclose(out.data[0], blstm_forward(Tensor(a), layer).data, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out.data[1, :4], blstm_forward(Tensor(b), layer).data, rtol=0, atol=1e-14)
    np.testing.assert_array_equal(out.data[1, 4:], 0.0)


def test_fc_identity_and_bias():
    layer = FC(LayerSpec("fc", 3, 3), rng())
    layer.W.data = np.eye(3)
    x = Tensor(rng(1).normal(size=(4, 3)))
    np.testing.assert_array_equal(fc_forward(x, layer).data, x.data)
    layer.W.data = np.zeros((3, 3))
    layer.b.data = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(fc_forward(x, layer).data, np.tile([1.0, -2.0, 0.5], (4, 1)))
    with pytest.raises(ShapeError):
        fc_forward(Tensor(np.ones((2, 4))), layer)


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_fc_gradient(seed):
    layer = FC(LayerSpec("fc", 3, 2), rng(seed))
    x = Tensor(rng(seed + 1).uniform(-2, 2, size=(4, 3)), requires_grad=True)
    ok, worst = check_gradients(lambda: ad.tsum(ad.tanh(fc_forward(x, layer))), [x, layer.W, layer.b])
    assert ok, worst


def test_grl_forward_identity_and_no_params():
    x = Tensor(rng().normal(size=(3, 4)))
    assert grl_apply(x).data.tobytes() == x.data.tobytes()
    assert GradientReversal().params == {}
    assert GradientReversal().scale == 1.0


def test_grl_square_gradient_at_three():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = grl_apply(x)
        loss = ad.mul(y, y)
    tape.backward(loss)
    assert x.grad == -6.0
    with Tape() as tape:
        loss = ad.mul(x, x)
    tape.backward(loss)
    assert x.grad == 6.0


@given(seed=st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_grl_negates_composite_gradient(seed):
    r = rng(seed)
    x = Tensor(r.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 2)))

    def f(inp):
        return ad.tsum(ad.sigmoid(ad.matmul(ad.tanh(inp), w)))

    with Tape() as tape:
        loss = f(grl_apply(x))
    tape.backward(loss)
    with_grl = x.grad.copy()
    with Tape() as tape:
        loss = f(x)
    tape.backward(loss)
    np.testing.assert_allclose(with_grl, -x.grad, rtol=0, atol=1e-12)


def test_encoder_lengths_and_min_input():
    specs = [LayerSpec("conv1d", 4, 6, 3, 2), LayerSpec("conv1d", 6, 6, 3, 1), LayerSpec("blstm", 6, 8)]
    enc = SharedEncoder(specs, rng())
    for T in range(7, 30):
        assert enc.output_length(T) == ((T - 3) // 2 + 1) - 2
    for out in range(1, 10):
        n = enc.min_input_length(out)
        assert enc.output_length(n) >= out
        try:
            shorter = enc.output_length(n - 1)
        except SequenceTooShortError:
            shorter = 0
        assert shorter < out
    x = Tensor(rng(1).normal(size=(2, 12, 4)))
    h, lengths = enc(x, [12, 9])
    assert h.shape == (2, enc.output_length(12), 8)
    assert list(lengths) == [enc.output_length(12), enc.output_length(9)]
