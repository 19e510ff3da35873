"""Synthetic two-language corpus with monolingual and code-switched utterances.

Each language has its own disjoint grapheme set.  A token ("word") is a short
run of graphemes from one language; tokens are separated by a word-boundary
symbol.  Every grapheme emits a few frames drawn around a fixed Gaussian
prototype, plus a task-specific channel offset (the two tasks stand in for
corpora recorded under different conditions) and white noise.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tensor
from .ctc import BLANK, LabelSequence, required_length
from .models import CS, MONO

SEPARATOR = 1
L1, L2 = 1, 2
CORPUS_MAGIC = b"ADVASRDS"
CORPUS_VERSION = 1
SPLITS = ("train", "dev", "test")


class SynthConfigError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    seed: int
    n_train_mono: int = 96
    n_train_cs: int = 96
    n_dev_mono: int = 24
    n_dev_cs: int = 24
    n_test_mono: int = 48
    n_test_cs: int = 48
    tokens_per_utterance: tuple = (3, 6)
    symbols_per_token: tuple = (1, 3)
    frames_per_symbol: tuple = (3, 4)
    switch_probability: float = 0.3
    noise_sigma: float = 0.6
    l1_size: int = 8
    l2_size: int = 8
    feature_dim: int = 16
    # magnitude of the per-task recording-condition offset
    channel_shift: float = 0.5
    # 0 gives independent L2 prototypes; 1 makes each L2 prototype equal an L1 one
    cross_lingual_overlap: float = 0.0
    # share of MONO utterances drawn from L2 instead of L1
    mono_l2_fraction: float = 0.0
    # encoder time reduction the corpus must stay feasible under
    conv_kernels: tuple = (3, 3)
    conv_strides: tuple = (2, 1)

    def __post_init__(self):
        for name in ("tokens_per_utterance", "symbols_per_token", "frames_per_symbol",
                     "conv_kernels", "conv_strides"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        for name in ("tokens_per_utterance", "symbols_per_token", "frames_per_symbol"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or lo_hi[0] < 1 or lo_hi[0] > lo_hi[1]:
                raise SynthConfigError(f"{name}: need 1 <= lo <= hi, got {lo_hi}")
        for name in ("switch_probability", "cross_lingual_overlap", "mono_l2_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthConfigError(f"{name} must lie in [0, 1], got {v}")
        counts = {f.name: getattr(self, f.name) for f in fields(self) if f.name.startswith("n_")}
        for name, v in counts.items():
            if v < 0:
                raise SynthConfigError(f"{name} must be non-negative, got {v}")
        if self.tokens_per_utterance[1] < 2 and (self.n_train_cs or self.n_dev_cs or self.n_test_cs):
            raise SynthConfigError("tokens_per_utterance: code-switched utterances need at least 2 tokens")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma must be non-negative")
        if min(self.l1_size, self.l2_size, self.feature_dim) < 1:
            raise SynthConfigError("alphabet sizes and feature_dim must be positive")
        if len(self.conv_kernels) != len(self.conv_strides):
            raise SynthConfigError("conv_kernels and conv_strides must have equal length")

    def count(self, split, task):
        return getattr(self, f"n_{split}_{task.lower()}")

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True)
class Alphabet:
    """Id layout: 0 blank, 1 word separator, then L1 graphemes, then L2 graphemes."""

    l1_size: int
    l2_size: int

    @property
    def size(self):
        return 2 + self.l1_size + self.l2_size

    def language_ids(self, lang):
        start = 2 if lang == L1 else 2 + self.l1_size
        n = self.l1_size if lang == L1 else self.l2_size
        return list(range(start, start + n))

    def language_of(self, sym):
        if sym < 2:
            return 0
        return L1 if sym < 2 + self.l1_size else L2

    def names(self):
        lower = [chr(ord("a") + i) if i < 26 else f"a{i}" for i in range(self.l1_size)]
        upper = [chr(ord("A") + i) if i < 26 else f"A{i}" for i in range(self.l2_size)]
        return ["<b>", "_"] + lower + upper

    def render(self, symbols):
        names = self.names()
        return "".join(names[s] for s in symbols).replace("_", " ")


@dataclass
class Utterance:
    id: str
    task: str
    features: Tensor
    transcript: LabelSequence
    language_tags: tuple

    def words(self):
        return split_words(self.transcript.symbols)


@dataclass
class Corpus:
    config: SynthConfig
    alphabet: Alphabet
    splits: dict = field(default_factory=dict)

    def __getitem__(self, split):
        return self.splits[split]

    @property
    def vocab_size(self):
        return self.alphabet.size


@dataclass
class CorpusStats:
    utterance_count: int
    total_tokens: int
    mean_cmi: float
    task_balance: dict


def split_words(symbols):
    words, cur = [], []
    for s in symbols:
        if s == SEPARATOR:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(s)
    if cur:
        words.append(tuple(cur))
    return words


def compute_cmi(utt_or_tags, n_independent=0):
    """Code-Mixing Index in [0, 100]: 100 * (1 - max_i w_i / (n - u)), 0 when n == u.

    ``w_i`` counts tokens tagged with language i, ``n`` all tokens and ``u``
    the language-independent ones.  Tags of 0 mark language-independent
    tokens in addition to ``n_independent``.
    """
    tags = utt_or_tags.language_tags if isinstance(utt_or_tags, Utterance) else tuple(utt_or_tags)
    u = n_independent + sum(1 for t in tags if t == 0)
    n = len(tags) + n_independent
    if n <= u:
        return 0.0
    counts = {}
    for t in tags:
        if t != 0:
            counts[t] = counts.get(t, 0) + 1
    # integer numerator keeps hand-derived values like 20 exact
    return 100.0 * (n - u - max(counts.values())) / (n - u)


def corpus_stats(utts):
    utts = list(utts)
    tasks = {MONO: 0, CS: 0}
    for u in utts:
        tasks[u.task] += 1
    return CorpusStats(
        utterance_count=len(utts),
        total_tokens=sum(len(u.language_tags) for u in utts),
        mean_cmi=float(np.mean([compute_cmi(u) for u in utts])) if utts else 0.0,
        task_balance=tasks,
    )


def _output_length(n, cfg):
    for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
        if n < k:
            return 0
        n = (n - k) // s + 1
    return n


def _prototypes(cfg, alphabet, rng):
    D = cfg.feature_dim
    protos = np.zeros((alphabet.size, D))
    protos[SEPARATOR] = rng.normal(size=D)
    l1 = alphabet.language_ids(L1)
    protos[l1] = rng.normal(size=(len(l1), D))
    a = cfg.cross_lingual_overlap
    for j, sym in enumerate(alphabet.language_ids(L2)):
        own = rng.normal(size=D)
        twin = protos[l1[j % len(l1)]]
        protos[sym] = a * twin + np.sqrt(1.0 - a * a) * own
    channels = {}
    for task in (MONO, CS):
        v = rng.normal(size=D)
        channels[task] = cfg.channel_shift * v / np.linalg.norm(v)
    return protos, channels


def _languages(rng, task, n_tokens, cfg):
    if task == MONO:
        lang = L2 if rng.random() < cfg.mono_l2_fraction else L1
        return [lang] * n_tokens
    langs = [L1]
    for _ in range(n_tokens - 1):
        cur = langs[-1]
        langs.append((L2 if cur == L1 else L1) if rng.random() < cfg.switch_probability else cur)
    if L2 not in langs:
        langs[int(rng.integers(1, n_tokens))] = L2
    return langs


def _utterance(rng, uid, task, cfg, alphabet, protos, channels):
    lo, hi = cfg.tokens_per_utterance
    if task == CS:
        lo = max(lo, 2)
    n_tokens = int(rng.integers(lo, hi + 1))
    langs = _languages(rng, task, n_tokens, cfg)
    symbols = []
    for i, lang in enumerate(langs):
        if i:
            symbols.append(SEPARATOR)
        ids = alphabet.language_ids(lang)
        n_sym = int(rng.integers(cfg.symbols_per_token[0], cfg.symbols_per_token[1] + 1))
        symbols.extend(int(ids[j]) for j in rng.integers(0, len(ids), size=n_sym))
    durations = rng.integers(cfg.frames_per_symbol[0], cfg.frames_per_symbol[1] + 1, size=len(symbols))
    need = required_length(symbols)
    # lengthen the longest-lived symbols until the encoder output can carry the transcript
    while _output_length(int(durations.sum()), cfg) < need:
        durations[int(np.argmin(durations))] += 1
    frame_syms = np.repeat(symbols, durations)
    feats = protos[frame_syms] + channels[task] + cfg.noise_sigma * rng.normal(size=(len(frame_syms), cfg.feature_dim))
    return Utterance(uid, task, Tensor(feats), LabelSequence(symbols, alphabet.size), tuple(langs))


def generate_corpus(cfg):
    """Train/dev/test splits, a pure function of ``cfg`` (bitwise reproducible)."""
    cfg.validate()
    alphabet = Alphabet(cfg.l1_size, cfg.l2_size)
    root = np.random.SeedSequence(int(cfg.seed))
    proto_seq, *split_seqs = root.spawn(1 + len(SPLITS))
    protos, channels = _prototypes(cfg, alphabet, np.random.default_rng(proto_seq))
    corpus = Corpus(cfg, alphabet)
    for split, seq in zip(SPLITS, split_seqs):
        rng = np.random.default_rng(seq)
        utts = []
        for task in (MONO, CS):
            for i in range(cfg.count(split, task)):
                uid = f"{split}-{task.lower()}-{i:05d}"
                utts.append(_utterance(rng, uid, task, cfg, alphabet, protos, channels))
        corpus.splits[split] = utts
    return corpus


# -- serialization -------------------------------------------------------------

def _encode_split(corpus, split):
    cfg = corpus.config
    header = {
        "config": cfg.to_dict(),
        "split": split,
        "feature_dim": cfg.feature_dim,
        "alphabet": {"l1_size": corpus.alphabet.l1_size, "l2_size": corpus.alphabet.l2_size,
                     "names": corpus.alphabet.names(), "blank_id": BLANK, "separator_id": SEPARATOR},
    }
    buf = io.BytesIO()
    raw = json.dumps(header, sort_keys=True).encode()
    buf.write(CORPUS_MAGIC)
    buf.write(struct.pack("<II", CORPUS_VERSION, len(raw)))
    buf.write(raw)
    utts = corpus.splits[split]
    buf.write(struct.pack("<I", len(utts)))
    for u in utts:
        uid = u.id.encode()
        buf.write(struct.pack("<I", len(uid)))
        buf.write(uid)
        buf.write(struct.pack("<B", 0 if u.task == MONO else 1))
        buf.write(struct.pack("<I", len(u.language_tags)))
        buf.write(bytes(u.language_tags))
        buf.write(struct.pack("<I", len(u.transcript)))
        buf.write(struct.pack(f"<{len(u.transcript)}I", *u.transcript.symbols))
        T, D = u.features.shape
        buf.write(struct.pack("<II", T, D))
        buf.write(np.ascontiguousarray(u.features.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_split(corpus, split, path):
    with open(path, "wb") as f:
        f.write(_encode_split(corpus, split))


def write_manifest(corpus, split, path):
    with open(path, "w") as f:
        f.write("id\ttask\ttranscript\tcmi\n")
        for u in corpus.splits[split]:
            f.write(f"{u.id}\t{u.task}\t{corpus.alphabet.render(u.transcript.symbols)}\t{compute_cmi(u):.4f}\n")


def save_corpus(corpus, directory):
    """Write ``<split>.bin`` and ``<split>.tsv`` per split; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for split in corpus.splits:
        p = os.path.join(directory, f"{split}.bin")
        save_split(corpus, split, p)
        m = os.path.join(directory, f"{split}.tsv")
        write_manifest(corpus, split, m)
        paths += [p, m]
    return paths


def _take(blob, pos, n, path):
    if pos + n > len(blob):
        raise CorpusFormatError(f"{path}: truncated corpus file")
    return blob[pos:pos + n], pos + n


def load_split(path, feature_dim=None):
    """Read one split file; returns (config, alphabet, split name, utterances)."""
    with open(path, "rb") as f:
        blob = f.read()
    magic, pos = _take(blob, 0, len(CORPUS_MAGIC), path)
    if magic != CORPUS_MAGIC:
        raise CorpusFormatError(f"{path}: not a corpus file")
    raw, pos = _take(blob, pos, 8, path)
    version, hlen = struct.unpack("<II", raw)
    if version != CORPUS_VERSION:
        raise CorpusFormatError(f"{path}: corpus version {version}, expected {CORPUS_VERSION}")
    raw, pos = _take(blob, pos, hlen, path)
    header = json.loads(raw.decode())
    D = int(header["feature_dim"])
    if feature_dim is not None and D != feature_dim:
        raise CorpusFormatError(f"{path}: feature dim {D} in header, expected {feature_dim}")
    cfg = SynthConfig(**header["config"])
    if cfg.feature_dim != D:
        raise CorpusFormatError(f"{path}: header feature dim {D} disagrees with config echo {cfg.feature_dim}")
    alphabet = Alphabet(header["alphabet"]["l1_size"], header["alphabet"]["l2_size"])
    raw, pos = _take(blob, pos, 4, path)
    (count,) = struct.unpack("<I", raw)
    utts = []
    for _ in range(count):
        raw, pos = _take(blob, pos, 4, path)
        raw, pos = _take(blob, pos, struct.unpack("<I", raw)[0], path)
        uid = raw.decode()
        raw, pos = _take(blob, pos, 1, path)
        task = MONO if raw[0] == 0 else CS
        raw, pos = _take(blob, pos, 4, path)
        raw, pos = _take(blob, pos, struct.unpack("<I", raw)[0], path)
        tags = tuple(raw)
        raw, pos = _take(blob, pos, 4, path)
        n = struct.unpack("<I", raw)[0]
        raw, pos = _take(blob, pos, 4 * n, path)
        symbols = struct.unpack(f"<{n}I", raw)
        raw, pos = _take(blob, pos, 8, path)
        T, Dr = struct.unpack("<II", raw)
        if Dr != D:
            raise CorpusFormatError(f"{path}: record {uid} has feature dim {Dr}, header says {D}")
        raw, pos = _take(blob, pos, 8 * T * Dr, path)
        feats = np.frombuffer(raw, dtype="<f8").reshape(T, Dr).astype(np.float64)
        utts.append(Utterance(uid, task, Tensor(feats), LabelSequence(symbols, alphabet.size), tags))
    if pos != len(blob):
        raise CorpusFormatError(f"{path}: trailing bytes after {count} records")
    return cfg, alphabet, header["split"], utts


def load_corpus(directory, feature_dim=None):
    corpus = None
    for split in SPLITS:
        p = os.path.join(directory, f"{split}.bin")
        if not os.path.exists(p):
            continue
        cfg, alphabet, name, utts = load_split(p, feature_dim)
        if corpus is None:
            corpus = Corpus(cfg, alphabet)
        corpus.splits[name] = utts
    if corpus is None:
        raise FileNotFoundError(f"no corpus splits under {directory}")
    return corpus
