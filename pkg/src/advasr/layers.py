"""Convolutional front-end, bidirectional LSTM, affine heads, gradient reversal.

All layers work on padded batches ``x[B, T, D]`` plus per-item lengths.  The
single-sequence helpers (:func:`conv1d_forward`, :func:`blstm_forward`,
:func:`fc_forward`) wrap a ``[T, D]`` tensor as a batch of one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

GATE_ORDER = ("input", "forget", "candidate", "output")
INIT_SCHEME = "uniform(+-1/sqrt(fan_in)); zero conv/fc bias; lstm forget bias +1"


class SequenceTooShortError(ShapeError):
    def __init__(self, length, kernel_width):
        super().__init__(f"sequence of {length} frames is shorter than kernel width {kernel_width}")
        self.length = length
        self.kernel_width = kernel_width


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv1d | blstm | fc
    input_dim: int
    output_dim: int
    kernel_width: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv1d", "blstm", "fc"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if min(self.input_dim, self.output_dim, self.kernel_width, self.stride) < 1:
            raise ValueError(f"layer dims must be positive: {self}")
        if self.kind == "conv1d" and self.kernel_width % 2 == 0:
            raise ValueError(f"conv kernel width must be odd, got {self.kernel_width}")
        if self.kind == "blstm" and self.output_dim % 2:
            raise ValueError("blstm output_dim must be even (two directions)")

    def to_dict(self):
        return asdict(self)


def _uniform(rng, shape, fan_in):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape)


def _param(value, name):
    return Tensor(value, requires_grad=True, name=name)


class Conv1d:
    """Temporal convolution followed by tanh (``activation=None`` skips it)."""

    def __init__(self, spec, rng, prefix="conv", activation="tanh"):
        if spec.kind != "conv1d":
            raise ValueError("Conv1d needs a conv1d LayerSpec")
        self.spec = spec
        self.activation = activation
        K, D, C = spec.kernel_width, spec.input_dim, spec.output_dim
        self.params = {
            f"{prefix}.W": _param(_uniform(rng, (K, D, C), K * D), f"{prefix}.W"),
            f"{prefix}.b": _param(np.zeros(C), f"{prefix}.b"),
        }
        self.prefix = prefix

    @property
    def W(self):
        return self.params[f"{self.prefix}.W"]

    @property
    def b(self):
        return self.params[f"{self.prefix}.b"]

    def output_length(self, length):
        K, s = self.spec.kernel_width, self.spec.stride
        if length < K:
            raise SequenceTooShortError(length, K)
        return (length - K) // s + 1

    def __call__(self, x, lengths):
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeError(f"conv1d: expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        out_lengths = np.array([self.output_length(int(n)) for n in lengths])
        y = ad.conv1d(x, self.W, self.b, stride=self.spec.stride)
        if self.activation == "tanh":
            y = ad.tanh(y)
        return y, out_lengths


class BLSTM:
    """Forward-time and backward-time LSTM passes, outputs concatenated."""

    def __init__(self, spec, rng, prefix="blstm"):
        if spec.kind != "blstm":
            raise ValueError("BLSTM needs a blstm LayerSpec")
        self.spec = spec
        self.prefix = prefix
        D, H = spec.input_dim, spec.output_dim // 2
        self.hidden = H
        self.params = {}
        for direction in ("fwd", "bwd"):
            b = np.zeros(4 * H)
            b[H:2 * H] = 1.0
            p = f"{prefix}.{direction}"
            self.params[f"{p}.Wx"] = _param(_uniform(rng, (D, 4 * H), D), f"{p}.Wx")
            self.params[f"{p}.Wh"] = _param(_uniform(rng, (H, 4 * H), H), f"{p}.Wh")
            self.params[f"{p}.b"] = _param(b, f"{p}.b")

    def direction(self, name):
        p = f"{self.prefix}.{name}"
        return self.params[f"{p}.Wx"], self.params[f"{p}.Wh"], self.params[f"{p}.b"]

    def __call__(self, x, lengths):
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeError(f"blstm: expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        T = x.shape[1]
        mask = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
        fwd = ad.lstm(x, *self.direction("fwd"), mask, reverse=False)
        bwd = ad.lstm(x, *self.direction("bwd"), mask, reverse=True)
        return ad.concat([fwd, bwd], axis=-1), np.asarray(lengths)


class FC:
    """Per-frame affine map, no activation."""

    def __init__(self, spec, rng, prefix="fc"):
        if spec.kind != "fc":
            raise ValueError("FC needs an fc LayerSpec")
        self.spec = spec
        self.prefix = prefix
        D, V = spec.input_dim, spec.output_dim
        self.params = {
            f"{prefix}.W": _param(_uniform(rng, (D, V), D), f"{prefix}.W"),
            f"{prefix}.b": _param(np.zeros(V), f"{prefix}.b"),
        }

    @property
    def W(self):
        return self.params[f"{self.prefix}.W"]

    @property
    def b(self):
        return self.params[f"{self.prefix}.b"]

    def __call__(self, x):
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeError(f"fc: expected input dim {self.spec.input_dim}, got {x.shape[-1]}")
        return ad.add_bias(ad.matmul(x, self.W), self.b)


class GradientReversal:
    """Identity on the way forward; multiplies incoming gradients by ``-scale``."""

    params = {}

    def __init__(self, scale=1.0):
        self.scale = float(scale)

    def __call__(self, x):
        return ad.grl(x, self.scale)


class SharedEncoder:
    """Conv front-end followed by a BLSTM stack (the shared parameters)."""

    def __init__(self, specs, rng, prefix="enc"):
        self.specs = list(specs)
        self.conv_layers = []
        self.blstm_layers = []
        for spec in self.specs:
            if spec.kind == "conv1d":
                if self.blstm_layers:
                    raise ValueError("conv layers must precede blstm layers")
                self.conv_layers.append(Conv1d(spec, rng, f"{prefix}.conv{len(self.conv_layers)}"))
            elif spec.kind == "blstm":
                self.blstm_layers.append(BLSTM(spec, rng, f"{prefix}.blstm{len(self.blstm_layers)}"))
            else:
                raise ValueError("encoder takes conv1d and blstm layers only")
        for a, b in zip(self.specs, self.specs[1:]):
            if a.output_dim != b.input_dim:
                raise ValueError(f"layer dims do not chain: {a} -> {b}")
        self.params = {}
        for layer in self.conv_layers + self.blstm_layers:
            self.params.update(layer.params)

    @property
    def output_dim(self):
        return self.specs[-1].output_dim

    def output_length(self, length):
        for layer in self.conv_layers:
            length = layer.output_length(length)
        return length

    def min_input_length(self, out_length):
        """Smallest input length whose encoder output has ``out_length`` frames."""
        n = max(out_length, 1)
        for layer in reversed(self.conv_layers):
            n = (n - 1) * layer.spec.stride + layer.spec.kernel_width
        return n

    def __call__(self, x, lengths):
        lengths = np.asarray(lengths)
        for layer in self.conv_layers:
            x, lengths = layer(x, lengths)
        for layer in self.blstm_layers:
            x, lengths = layer(x, lengths)
        return x, lengths


def _as_batch(x):
    if len(x.shape) != 2:
        raise ShapeError(f"expected a [T, D] tensor, got {x.shape}")
    return ad.record("unsqueeze", (x,), x.data[None], lambda g: (g[0],))


def _unbatch(y, length):
    return ad.record("squeeze", (y,), y.data[0, :length], lambda g: _pad_back(g, y.shape))


def _pad_back(g, shape):
    full = np.zeros(shape)
    full[0, :g.shape[0]] = g
    return (full,)


def conv1d_forward(x, layer):
    T = x.shape[0]
    y, lengths = layer(_as_batch(x), [T])
    return _unbatch(y, int(lengths[0]))


def blstm_forward(x, layer):
    T = x.shape[0]
    y, _ = layer(_as_batch(x), [T])
    return _unbatch(y, T)


def fc_forward(x, layer):
    return layer(x)


def grl_apply(x, scale=1.0):
    return ad.grl(x, scale)
