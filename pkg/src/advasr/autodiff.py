"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside a
``with Tape():`` block nothing is recorded, which is how inference runs.

Broadcasting is limited to scalar-with-tensor and equal shapes.  Bias addition
over the last axis has its own op (:func:`add_bias`) instead of general
broadcasting.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor", "Tape", "NumericDomainError", "ShapeError", "TapeError",
    "as_tensor", "add", "sub", "mul", "neg", "tanh", "sigmoid", "exp", "log",
    "log_sigmoid", "matmul", "add_bias", "tsum", "log_softmax", "concat",
    "take", "masked_mean", "grl", "conv1d", "lstm", "record", "active_tape",
]


class ShapeError(ValueError):
    pass


class NumericDomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``data`` may be reassigned (the optimizer does this) but never with a
    different shape.
    """

    __slots__ = ("_data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"shape must be positive, got {arr.shape}")
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @property
    def data(self):
        return self._data

    @data.setter
    def data(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data.shape:
            raise ShapeError(f"cannot change shape {self._data.shape} -> {value.shape}")
        self._data = value

    @property
    def shape(self):
        return self._data.shape

    @property
    def size(self):
        return self._data.size

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        return float(self._data.reshape(-1)[0]) if self.size == 1 else float(self._data)

    def numpy(self):
        return self._data.copy()

    def detach(self):
        return Tensor(self._data)

    def backward(self):
        if self._node is None:
            raise TapeError("tensor was not produced on a tape")
        self._node.tape.backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward", "tape")

    def __init__(self, op, inputs, out, backward, tape):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.tape = tape


_TAPES = []


def active_tape():
    return _TAPES[-1] if _TAPES else None


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is already topological, so
    ``backward`` walks them in reverse exactly once.  A tape may be
    back-propagated once; call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes = []
        self._used = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def reset(self):
        self.nodes = []
        self._used = False

    def _add(self, node):
        if self._used:
            raise TapeError("tape already back-propagated; reset() before recording")
        self.nodes.append(node)

    def leaves(self):
        seen = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.is_leaf:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss):
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._used:
            raise TapeError("backward() already ran on this tape")
        if not self.nodes:
            raise TapeError("tape is empty")
        self._used = True
        grads = {id(loss): np.ones(loss.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            leaf.grad = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op, inputs, out_data, backward):
    """Wrap ``out_data`` in a Tensor and register ``backward`` on the active tape.

    ``backward(g)`` must return one gradient (or None) per input.
    """
    out = Tensor.__new__(Tensor)
    out._data = out_data
    out.grad = None
    out.name = None
    out._node = None
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = _Node(op, tuple(inputs), out, backward, tape)
        tape._add(node)
        out._node = node
    return out


def _binary_shapes(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a):
    return record("neg", (a,), -a.data, lambda g: (-g,))


def tanh(a):
    y = np.tanh(a.data)
    return record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    y = _sigmoid(a.data)
    return record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a):
    """log(sigmoid(x)) without forming sigmoid(x) for large negative x."""
    x = a.data
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return record("log_sigmoid", (a,), y, lambda g: (g * _sigmoid(-x),))


_EXP_MAX = np.log(np.finfo(np.float64).max)


def exp(a):
    if np.any(a.data > _EXP_MAX):
        raise NumericDomainError(f"exp overflow: max input {a.data.max():.6g}")
    y = np.exp(a.data)
    return record("exp", (a,), y, lambda g: (g * y,))


def log(a):
    if np.any(a.data <= 0):
        raise NumericDomainError(f"log of non-positive value (min {a.data.min():.6g})")
    x = a.data
    return record("log", (a,), np.log(x), lambda g: (g / x,))


def matmul(a, b):
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` act as a batch of rows."""
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", (a, b), ad @ bd, backward)


def add_bias(x, b):
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    return record("add_bias", (x, b), x.data + b.data,
                  lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))


def tsum(a, axis=None):
    shape = a.shape
    if axis is None:
        return record("sum", (a,), np.array(a.data.sum()),
                      lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return record("sum", (a,), out,
                  lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def log_softmax(a):
    """Log-probabilities along the last axis (max-shifted)."""
    if a.shape[-1] < 2:
        raise ShapeError("log_softmax needs at least 2 classes")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def backward(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", (a,), y, backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(tensors), out, backward)


def take(a, index, axis=0):
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (full,)

    return record("take", (a,), np.take(a.data, index, axis=axis), backward)


def masked_mean(x, lengths):
    """Mean over the time axis of ``x[B, T, D]`` using the first ``lengths[b]`` frames."""
    lengths = np.asarray(lengths)
    T = x.shape[1]
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    w = (mask / lengths[:, None])[:, :, None]
    out = (x.data * w).sum(axis=1)
    return record("masked_mean", (x,), out, lambda g: (g[:, None, :] * w,))


def grl(x, scale=1.0):
    """Gradient reversal: identity forward, ``-scale * g`` backward."""
    return record("grl", (x,), x.data, lambda g: (-scale * g,))


def conv1d(x, w, b, stride=1):
    """Valid temporal convolution with bias, no activation.

    x: [B, T, D]; w: [K, D, C]; b: [C].  Output [B, T', C] with
    T' = (T - K) // stride + 1.
    """
    B, T, D = x.shape
    K, Dw, C = w.shape
    if Dw != D:
        raise ShapeError(f"conv1d: input dim {D} != kernel input dim {Dw}")
    if T < K:
        raise ShapeError(f"conv1d: sequence length {T} shorter than kernel width {K}")
    Tout = (T - K) // stride + 1
    span = stride * (Tout - 1) + 1
    xd, wd = x.data, w.data
    out = np.zeros((B, Tout, C))
    for k in range(K):
        out += xd[:, k:k + span:stride, :] @ wd[k]
    out += b.data

    def backward(g):
        gx = np.zeros_like(xd)
        gw = np.empty_like(wd)
        g2 = g.reshape(-1, C)
        for k in range(K):
            xs = xd[:, k:k + span:stride, :]
            gw[k] = xs.reshape(-1, D).T @ g2
            gx[:, k:k + span:stride, :] += g @ wd[k].T
        return gx, gw, g2.sum(axis=0)

    return record("conv1d", (x, w, b), out, backward)


def lstm(x, wx, wh, b, mask, reverse=False):
    """Single-direction LSTM over ``x[B, T, D]`` with zero initial state.

    Gate blocks of the 4H axis are ordered (input, forget, candidate, output).
    ``mask[B, T]`` zeroes state and output at padded frames, so a reversed
    pass starts fresh at each sequence's own last frame.
    """
    B, T, D = x.shape
    H = wh.shape[0]
    if wx.shape != (D, 4 * H) or wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: weight shapes {wx.shape}, {wh.shape}, {b.shape} do not fit input {x.shape}")
    xd, whd = x.data, wh.data
    xz = xd @ wx.data + b.data
    order = range(T - 1, -1, -1) if reverse else range(T)
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    cache = []
    for t in order:
        z = xz[:, t] + h @ whd
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        gg = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        m = mask[:, t:t + 1]
        h_new = o * tc * m
        cache.append((t, h, c, i, f, gg, o, tc, m))
        c = c_new * m
        h = h_new
        out[:, t] = h

    def backward(g):
        dxz = np.zeros((B, T, 4 * H))
        dwh = np.zeros_like(whd)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t, h_prev, c_prev, i, f, gg, o, tc, m in reversed(cache):
            dh = (g[:, t] + dh_next) * m
            dc = dc_next * m + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc * gg * i * (1.0 - i),
                dc * c_prev * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            dxz[:, t] = dz
            dwh += h_prev.T @ dz
            dh_next = dz @ whd.T
            dc_next = dc * f
        d2 = dxz.reshape(-1, 4 * H)
        return dxz @ wx.data.T, xd.reshape(-1, D).T @ d2, dwh, d2.sum(axis=0)

    return record("lstm", (x, wx, wh, b), out, backward)
