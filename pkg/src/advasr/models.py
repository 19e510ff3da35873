"""Baseline, pooled, adversarial-pooled and multi-task adversarial recognizers.

Every architecture is a :class:`SharedEncoder` followed by one or two CTC
heads, plus (for the adversarial kinds) a discriminator that sees the encoder
output through a gradient reversal layer.  Because the GRL flips the sign of
the adversarial gradient on its way into the encoder, a single backward pass
over the summed loss and a plain SGD step give every partition its own update
direction: the encoder descends the task losses and ascends the adversarial
loss, while heads and discriminator descend their own terms.
"""
from __future__ import annotations

import enum
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctc import BLANK, ctc_loss_batch
from .layers import FC, GATE_ORDER, INIT_SCHEME, GradientReversal, LayerSpec, SharedEncoder

MONO = "MONO"
CS = "CS"
TASKS = (MONO, CS)

CHECKPOINT_MAGIC = b"ADVASRCK"
CHECKPOINT_VERSION = 1


class ModelKind(str, enum.Enum):
    BASELINE_MONO = "BASELINE_MONO"
    BASELINE_CS = "BASELINE_CS"
    POOLED = "POOLED"
    ADV_POOLED = "ADV_POOLED"
    MULTITASK_ADV = "MULTITASK_ADV"

    @property
    def adversarial(self):
        return self in (ModelKind.ADV_POOLED, ModelKind.MULTITASK_ADV)

    @property
    def tasks(self):
        if self is ModelKind.BASELINE_MONO:
            return (MONO,)
        if self is ModelKind.BASELINE_CS:
            return (CS,)
        return TASKS


class RoutingError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class TransferError(ValueError):
    pass


@dataclass
class ModelConfig:
    kind: ModelKind
    feature_dim: int
    vocab_size: int
    conv_channels: tuple = (32, 32)
    conv_kernels: tuple = (3, 3)
    conv_strides: tuple = (2, 1)
    blstm_hidden: int = 64
    blstm_layers: int = 2
    seed: int = 0
    grl_scale: float = 1.0
    # also reverse the CS-task gradient into the encoder (ascend L_CS on the shared layers)
    ascend_cs_loss: bool = False

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        self.conv_channels = tuple(self.conv_channels)
        self.conv_kernels = tuple(self.conv_kernels)
        self.conv_strides = tuple(self.conv_strides)
        if not len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides):
            raise ValueError("conv_channels, conv_kernels and conv_strides must have equal length")

    def encoder_specs(self):
        specs = []
        dim = self.feature_dim
        for c, k, s in zip(self.conv_channels, self.conv_kernels, self.conv_strides):
            specs.append(LayerSpec("conv1d", dim, c, k, s))
            dim = c
        for _ in range(self.blstm_layers):
            specs.append(LayerSpec("blstm", dim, 2 * self.blstm_hidden))
            dim = 2 * self.blstm_hidden
        return specs

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kind"] = self.kind.value
        for k in ("conv_channels", "conv_kernels", "conv_strides"):
            d[k] = list(d[k])
        return d


PRESETS = {
    "desk": dict(conv_channels=(32, 32), conv_kernels=(3, 3), conv_strides=(2, 1),
                 blstm_hidden=64, blstm_layers=2),
    "paper": dict(conv_channels=(32, 32), conv_kernels=(3, 3), conv_strides=(2, 1),
                  blstm_hidden=1024, blstm_layers=5),
}


@dataclass
class ParameterPartition:
    shared: dict = field(default_factory=dict)
    head_mono: dict = field(default_factory=dict)
    head_cs: dict = field(default_factory=dict)
    head_pooled: dict = field(default_factory=dict)
    discriminator: dict = field(default_factory=dict)

    GROUPS = ("shared", "head_mono", "head_cs", "head_pooled", "discriminator")

    def groups(self):
        return {g: getattr(self, g) for g in self.GROUPS}

    def all(self):
        out = {}
        for group in self.groups().values():
            overlap = out.keys() & group.keys()
            if overlap:
                raise ValueError(f"parameter names in more than one partition: {sorted(overlap)}")
            out.update(group)
        return out

    def group_of(self, name):
        for g, params in self.groups().items():
            if name in params:
                return g
        raise KeyError(name)


def _sub_rng(seed, kind, group):
    salt = [int(seed), sum(ord(ch) * 31 ** i for i, ch in enumerate(f"{kind}:{group}")) % (2 ** 32)]
    return np.random.default_rng(np.random.SeedSequence(salt))


class Discriminator:
    """GRL, temporal mean pooling, one affine unit; sigmoid applied in the loss."""

    def __init__(self, input_dim, rng, scale=1.0, prefix="disc"):
        self.grl = GradientReversal(scale)
        self.fc = FC(LayerSpec("fc", input_dim, 1), rng, prefix)
        self.params = self.fc.params

    def logits(self, h, lengths, reverse=True):
        x = self.grl(h) if reverse else h
        pooled = ad.masked_mean(x, lengths)
        return _squeeze_last(self.fc(pooled))


def _squeeze_last(x):
    return ad.record("squeeze", (x,), x.data[..., 0], lambda g: (g[..., None],))


@dataclass
class EncodedBatch:
    hidden: Tensor
    lengths: np.ndarray
    utts: list


class Model:
    def __init__(self, config, provenance=None):
        self.config = config
        kind = config.kind
        self.kind = kind
        self.encoder = SharedEncoder(config.encoder_specs(), _sub_rng(config.seed, kind.value, "shared"))
        H = self.encoder.output_dim
        V = config.vocab_size
        self.partition = ParameterPartition(shared=dict(self.encoder.params))
        self.heads = {}
        if kind is ModelKind.MULTITASK_ADV:
            self.heads[MONO] = FC(LayerSpec("fc", H, V), _sub_rng(config.seed, kind.value, "head_mono"), "head.mono")
            self.heads[CS] = FC(LayerSpec("fc", H, V), _sub_rng(config.seed, kind.value, "head_cs"), "head.cs")
            self.partition.head_mono = dict(self.heads[MONO].params)
            self.partition.head_cs = dict(self.heads[CS].params)
        else:
            pooled = FC(LayerSpec("fc", H, V), _sub_rng(config.seed, kind.value, "head_pooled"), "head.pooled")
            self.heads[MONO] = self.heads[CS] = pooled
            self.partition.head_pooled = dict(pooled.params)
        self.discriminator = None
        if kind.adversarial:
            self.discriminator = Discriminator(H, _sub_rng(config.seed, kind.value, "discriminator"),
                                               config.grl_scale)
            self.partition.discriminator = dict(self.discriminator.params)
        self.provenance = dict(provenance or {})

    @property
    def params(self):
        return self.partition.all()

    def set_grl_scale(self, scale):
        if self.discriminator is not None:
            self.discriminator.grl.scale = float(scale)

    def check_task(self, task, allow_cross_task=False):
        if task not in TASKS:
            raise RoutingError(f"unknown task {task!r}")
        if task not in self.kind.tasks and not allow_cross_task:
            raise RoutingError(f"{self.kind.value} does not accept {task} utterances")

    def output_length(self, n_frames):
        return self.encoder.output_length(n_frames)

    def encode(self, utts):
        """Run the shared encoder over a padded batch of utterances."""
        lengths = np.array([u.features.shape[0] for u in utts])
        D = self.config.feature_dim
        x = np.zeros((len(utts), int(lengths.max()), D))
        for b, u in enumerate(utts):
            if u.features.shape[1] != D:
                raise ValueError(f"utterance {u.id}: feature dim {u.features.shape[1]} != {D}")
            x[b, :lengths[b]] = u.features.data
        h, out_lengths = self.encoder(Tensor(x), lengths)
        return EncodedBatch(h, out_lengths, list(utts))

    def head_log_probs(self, enc, idx, task):
        h = enc.hidden if len(idx) == len(enc.utts) and list(idx) == list(range(len(enc.utts))) \
            else ad.take(enc.hidden, idx, axis=0)
        if task == CS and self.config.ascend_cs_loss and self.kind is ModelKind.MULTITASK_ADV:
            h = ad.grl(h, 1.0)
        return ad.log_softmax(self.heads[task](h))

    def forward_task(self, utt, allow_cross_task=False):
        """Frame log-probabilities ``[T', V]`` for one utterance, routed by its task."""
        self.check_task(utt.task, allow_cross_task)
        enc = self.encode([utt])
        lp = self.head_log_probs(enc, [0], utt.task)
        n = int(enc.lengths[0])
        return ad.record("squeeze", (lp,), lp.data[0, :n], lambda g: (_pad_first(g, lp.shape),))

    def batch_log_probs(self, utts, allow_cross_task=False):
        """Inference helper: list of ``[T', V]`` arrays, each from its task's head."""
        for u in utts:
            self.check_task(u.task, allow_cross_task)
        enc = self.encode(utts)
        out = [None] * len(utts)
        for task in TASKS:
            idx = [i for i, u in enumerate(utts) if u.task == task]
            if idx:
                lp = self.head_log_probs(enc, idx, task).data
                for j, i in enumerate(idx):
                    out[i] = lp[j, :enc.lengths[i]]
        return out

    def task_losses(self, enc):
        """Summed CTC loss per task over the batch; tasks absent from the batch are omitted."""
        losses = {}
        for task in TASKS:
            idx = [i for i, u in enumerate(enc.utts) if u.task == task]
            if not idx:
                continue
            for i in idx:
                self.check_task(enc.utts[i].task)
            lp = self.head_log_probs(enc, idx, task)
            per_utt = ctc_loss_batch(lp, enc.lengths[idx], [enc.utts[i].transcript for i in idx])
            losses[task] = ad.tsum(per_utt)
        return losses

    def adversarial_loss(self, enc):
        """Binary cross-entropy of the discriminator, CS = 1, MONO = 0, summed over the batch."""
        if self.discriminator is None:
            raise RoutingError(f"{self.kind.value} has no discriminator")
        z = self.discriminator.logits(enc.hidden, enc.lengths)
        y = np.array([1.0 if u.task == CS else 0.0 for u in enc.utts])
        # -[y log s(z) + (1 - y) log s(-z)]
        ll = ad.add(ad.mul(Tensor(y), ad.log_sigmoid(z)), ad.mul(Tensor(1.0 - y), ad.log_sigmoid(ad.neg(z))))
        return ad.neg(ad.tsum(ll))

    def discriminator_probs(self, utts):
        if self.discriminator is None:
            raise RoutingError(f"{self.kind.value} has no discriminator")
        enc = self.encode(utts)
        z = self.discriminator.logits(enc.hidden, enc.lengths).data
        return 1.0 / (1.0 + np.exp(-z))

    def loss_terms(self, utts):
        """All loss terms for a batch, keyed 'MONO', 'CS' and (adversarial kinds) 'ADV'."""
        enc = self.encode(utts)
        terms = self.task_losses(enc)
        if self.discriminator is not None:
            terms["ADV"] = self.adversarial_loss(enc)
        return terms


def _pad_first(g, shape):
    full = np.zeros(shape)
    full[0, :g.shape[0]] = g
    return full


def _total(terms):
    total = None
    for key in ("MONO", "CS", "ADV"):
        if key in terms:
            total = terms[key] if total is None else ad.add(total, terms[key])
    return total


def forward_task(model, utt, allow_cross_task=False):
    return model.forward_task(utt, allow_cross_task)


def adversarial_loss(model, batch):
    if not model.kind.adversarial:
        raise RoutingError(f"adversarial loss needs ADV_POOLED or MULTITASK_ADV, got {model.kind.value}")
    return model.adversarial_loss(model.encode(batch))


def composite_loss_adv_pooled(model, batch):
    """Pooled-head CTC summed over the batch plus the adversarial term."""
    if model.kind is not ModelKind.ADV_POOLED:
        raise RoutingError(f"expected ADV_POOLED, got {model.kind.value}")
    return _total(model.loss_terms(batch))


def composite_loss_multitask(model, batch):
    """Task-routed CTC losses (each through its own head) plus the adversarial term."""
    if model.kind is not ModelKind.MULTITASK_ADV:
        raise RoutingError(f"expected MULTITASK_ADV, got {model.kind.value}")
    return _total(model.loss_terms(batch))


def total_loss(model, batch):
    """Sum of every loss term the model kind defines."""
    return _total(model.loss_terms(batch))


# -- checkpoints -------------------------------------------------------------

def _header(model):
    return {
        "model": model.config.to_dict(),
        "layer_specs": [s.to_dict() for s in model.config.encoder_specs()],
        "blank_id": BLANK,
        "gate_order": list(GATE_ORDER),
        "init": INIT_SCHEME,
        "provenance": model.provenance,
        "partitions": {g: sorted(p) for g, p in model.partition.groups().items()},
    }


def checkpoint_bytes(model):
    buf = io.BytesIO()
    header = json.dumps(_header(model), sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    params = model.params
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = params[name].data
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """Parse a checkpoint into (header dict, {name: ndarray})."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    version, hlen = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    header = json.loads(r.take(hlen).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: trailing bytes after tensor records")
    return header, tensors


def load_checkpoint(path, expected_kind=None):
    header, tensors = read_checkpoint(path)
    config = ModelConfig(**header["model"])
    if expected_kind is not None and config.kind is not ModelKind(expected_kind):
        raise CheckpointError(f"{path} holds a {config.kind.value} model, not {ModelKind(expected_kind).value}; "
                              "use transfer_shared to initialize across kinds")
    model = Model(config, header.get("provenance"))
    params = model.params
    if set(params) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match a {config.kind.value} model")
    for name, arr in tensors.items():
        if arr.shape != params[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, expected {params[name].shape}")
        params[name].data = arr
    return model


def _digest(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def transfer_shared(source, config):
    """New model of ``config`` whose shared encoder is copied from ``source``.

    ``source`` is a Model or checkpoint path.  Heads and discriminator come
    from the recipient's own seeded initializer.  Provenance records a digest
    of the donor encoder, not its path, so reruns elsewhere stay byte-identical.
    """
    if isinstance(source, Model):
        donor_specs = source.config.encoder_specs()
        donor_shared = {k: v.data for k, v in source.partition.shared.items()}
        donor_kind = source.kind.value
    else:
        header, tensors = read_checkpoint(source)
        donor_specs = [LayerSpec(**s) for s in header["layer_specs"]]
        shared_names = header["partitions"]["shared"]
        donor_shared = {k: tensors[k] for k in shared_names}
        donor_kind = header["model"]["kind"]
    want = config.encoder_specs()
    if donor_specs != want:
        diffs = []
        for i in range(max(len(donor_specs), len(want))):
            a = donor_specs[i] if i < len(donor_specs) else None
            b = want[i] if i < len(want) else None
            if a != b:
                diffs.append(f"layer {i}: donor {a} vs recipient {b}")
        raise TransferError("shared encoder layouts differ: " + "; ".join(diffs))
    model = Model(config, {"donor_kind": donor_kind, "donor_encoder_sha256": _digest(donor_shared)})
    for name, tensor in model.partition.shared.items():
        tensor.data = np.array(donor_shared[name], dtype=np.float64)
    return model


def make_model(kind, feature_dim, vocab_size, preset="desk", seed=0, **overrides):
    params = dict(PRESETS[preset])
    params.update(overrides)
    return Model(ModelConfig(kind=ModelKind(kind), feature_dim=feature_dim, vocab_size=vocab_size,
                             seed=seed, **params))


def with_kind(config, kind, seed=None):
    return replace(config, kind=ModelKind(kind), seed=config.seed if seed is None else seed)
