"""CTC loss, exhaustive-alignment oracle, greedy/prefix-beam decoding, n-gram LM."""
from __future__ import annotations

import itertools
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError

BLANK = 0
NEG_INF = -1e30
LM_FORMAT_VERSION = 1


class CTCInfeasibleError(ValueError):
    """Too few frames for the target; the loss would be +inf."""


class OracleScopeError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSequence:
    symbols: tuple
    alphabet_size: int

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(int(s) for s in self.symbols))
        bad = [s for s in self.symbols if not 1 <= s < self.alphabet_size]
        if bad:
            raise ValueError(f"label ids {bad} outside [1, {self.alphabet_size - 1}]")

    def __len__(self):
        return len(self.symbols)


def _symbols(target):
    return tuple(target.symbols) if isinstance(target, LabelSequence) else tuple(int(s) for s in target)


def required_length(target):
    """Minimum frame count: one per label plus a blank between each repeated pair."""
    syms = _symbols(target)
    return len(syms) + sum(1 for a, b in zip(syms, syms[1:]) if a == b)


def _logsumexp3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def _ctc_single(lp, target):
    """Negative log-likelihood and its gradient w.r.t. ``lp[T, V]``."""
    T, V = lp.shape
    syms = _symbols(target)
    if T < required_length(syms):
        raise CTCInfeasibleError(f"{T} frames cannot emit {len(syms)} labels "
                                 f"(needs {required_length(syms)})")
    ext = np.zeros(2 * len(syms) + 1, dtype=np.intp)
    ext[1::2] = syms
    S = ext.size
    # transitions from s-2 allowed only into a label that differs from label s-2
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]
    emit = lp[:, ext]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = np.full(S, NEG_INF)
        s1[1:] = prev[:-1]
        s2 = np.full(S, NEG_INF)
        s2[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        alpha[t] = np.maximum(_logsumexp3(prev, s1, s2) + emit[t], NEG_INF)

    # beta[t, s]: log-prob of finishing from state s at t, excluding frame t's emission
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        n1 = np.full(S, NEG_INF)
        n1[:-1] = nxt[1:]
        n2 = np.full(S, NEG_INF)
        n2[:-2] = np.where(skip[2:], nxt[2:], NEG_INF)
        beta[t] = np.maximum(_logsumexp3(nxt, n1, n2), NEG_INF)

    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if tail <= NEG_INF / 2:
        raise CTCInfeasibleError("no alignment has non-zero probability")
    occ = np.exp(alpha + beta - tail)
    grad = np.zeros((T, V))
    np.add.at(grad.T, ext, -occ.T)
    return -float(tail), grad


def ctc_loss_batch(log_probs, lengths, targets):
    """Per-item CTC losses for padded ``log_probs[B, T, V]``; returns a [B] tensor."""
    B = log_probs.shape[0]
    if len(targets) != B or len(lengths) != B:
        raise ShapeError("ctc_loss_batch: one length and target per batch item")
    data = log_probs.data
    losses = np.zeros(B)
    grads = np.zeros_like(data)
    for b in range(B):
        n = int(lengths[b])
        losses[b], grads[b, :n] = _ctc_single(data[b, :n], targets[b])
    return ad.record("ctc_loss", (log_probs,), losses, lambda g: (grads * g[:, None, None],))


def ctc_loss(log_probs, target):
    """-log P(target | log_probs) for a single ``[T, V]`` log-probability tensor."""
    if len(log_probs.shape) != 2:
        raise ShapeError(f"ctc_loss expects [T, V], got {log_probs.shape}")
    if isinstance(target, LabelSequence) and target.alphabet_size != log_probs.shape[1]:
        raise ShapeError(f"alphabet size {target.alphabet_size} != V={log_probs.shape[1]}")
    T = log_probs.shape[0]
    x = ad.record("unsqueeze", (log_probs,), log_probs.data[None], lambda g: (g[0],))
    losses = ctc_loss_batch(x, [T], [target])
    return ad.record("squeeze", (losses,), losses.data.reshape(()), lambda g: (g.reshape(1),))


def collapse(path):
    out = []
    prev = None
    for k in path:
        if k != prev and k != BLANK:
            out.append(int(k))
        prev = k
    return tuple(out)


def ctc_brute_force(log_probs, target, max_paths=10 ** 6):
    """Negative log-likelihood by summing every length-T path; inf when none collapse to target."""
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    T, V = lp.shape
    if V ** T > max_paths:
        raise OracleScopeError(f"V^T = {V}^{T} exceeds the oracle limit {max_paths}")
    syms = _symbols(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == syms:
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return math.inf if total == 0.0 else -math.log(total)


def sequence_log_prob(log_probs, seq):
    """log P(seq | log_probs) via the forward recursion; -inf when infeasible."""
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    try:
        nll, _ = _ctc_single(lp, seq)
    except CTCInfeasibleError:
        return -math.inf
    return -nll


def greedy_decode(log_probs, alphabet_size=None):
    lp = np.asarray(getattr(log_probs, "data", log_probs))
    V = lp.shape[1] if alphabet_size is None else alphabet_size
    return LabelSequence(collapse(np.argmax(lp, axis=1)), V)


BOS = -1
EOS = -2


@dataclass
class NGramLM:
    """Add-k smoothed character n-gram model over symbol ids.

    Contexts are tuples of the previous ``order - 1`` ids, left-padded with
    BOS.  The prediction vocabulary is every non-blank symbol plus EOS.
    """

    order: int
    add_k: float
    alphabet_size: int
    log_probs: dict = field(default_factory=dict)

    @property
    def vocab(self):
        return list(range(1, self.alphabet_size)) + [EOS]

    def context(self, history):
        n = self.order - 1
        if n == 0:
            return ()
        padded = (BOS,) * n + tuple(history)
        return padded[-n:]

    def logprob(self, history, symbol):
        table = self.log_probs.get(self.context(history))
        if table is None:
            return -math.log(len(self.vocab))
        return table.get(symbol, -math.inf)

    def score(self, seq, include_end=True):
        syms = _symbols(seq)
        total = sum(self.logprob(syms[:i], s) for i, s in enumerate(syms))
        if include_end:
            total += self.logprob(syms, EOS)
        return total


def train_ngram(corpus, order=3, add_k=0.1, alphabet_size=None):
    if order < 1:
        raise ValueError(f"n-gram order must be >= 1, got {order}")
    if add_k < 0:
        raise ValueError("add_k must be non-negative")
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot train an n-gram model on an empty corpus")
    if alphabet_size is None:
        alphabet_size = corpus[0].alphabet_size
    lm = NGramLM(order, add_k, alphabet_size)
    counts = defaultdict(Counter)
    for seq in corpus:
        syms = _symbols(seq)
        for i, s in enumerate(syms + (EOS,)):
            counts[lm.context(syms[:i])][s] += 1
    vocab = lm.vocab
    for ctx, ctr in counts.items():
        denom = sum(ctr.values()) + add_k * len(vocab)
        table = {}
        for s in vocab:
            num = ctr.get(s, 0) + add_k
            table[s] = math.log(num / denom) if num > 0 else -math.inf
        lm.log_probs[ctx] = table
    return lm


def save_lm(lm, path):
    lines = [f"# advasr n-gram lm v{LM_FORMAT_VERSION}", f"order {lm.order}",
             f"add_k {lm.add_k!r}", f"alphabet_size {lm.alphabet_size}"]
    for ctx in sorted(lm.log_probs):
        for sym, lp in sorted(lm.log_probs[ctx].items()):
            lines.append(f"{' '.join(map(str, ctx)) or '-'}\t{sym}\t{lp!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_lm(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != f"# advasr n-gram lm v{LM_FORMAT_VERSION}":
        raise ValueError(f"{path}: not a v{LM_FORMAT_VERSION} n-gram file")
    header = dict(line.split(" ", 1) for line in lines[1:4])
    lm = NGramLM(int(header["order"]), float(header["add_k"]), int(header["alphabet_size"]))
    for line in lines[4:]:
        ctx, sym, lp = line.split("\t")
        key = () if ctx == "-" else tuple(int(c) for c in ctx.split())
        lm.log_probs.setdefault(key, {})[int(sym)] = float(lp)
    return lm


def _combined(lp, seq, lm, lm_weight):
    score = sequence_log_prob(lp, seq)
    if lm is not None and lm_weight != 0:
        score += lm_weight * lm.score(seq)
    return score


def _prefix_beam(lp, lm, beam, lm_weight):
    T, V = lp.shape
    use_lm = lm is not None and lm_weight != 0

    lm_cache = {}

    def lm_term(prefix):
        if not use_lm:
            return 0.0
        if prefix not in lm_cache:
            lm_cache[prefix] = lm_weight * lm.logprob(prefix[:-1], prefix[-1])
        return lm_cache[prefix]

    # prefix -> (log P ending in blank, log P ending in non-blank, accumulated LM score)
    beams = {(): (0.0, -math.inf, 0.0)}
    for t in range(T):
        row = lp[t]
        nxt = defaultdict(lambda: [-math.inf, -math.inf, 0.0])
        for prefix, (pb, pnb, lms) in beams.items():
            total = np.logaddexp(pb, pnb)
            entry = nxt[prefix]
            entry[2] = lms
            entry[0] = np.logaddexp(entry[0], total + row[BLANK])
            if prefix:
                entry[1] = np.logaddexp(entry[1], pnb + row[prefix[-1]])
            for k in range(1, V):
                if row[k] == -math.inf:
                    continue
                ext = prefix + (k,)
                bonus = lm_term(ext)
                if bonus == -math.inf:
                    continue
                e = nxt[ext]
                e[2] = lms + bonus
                src = pb if prefix and prefix[-1] == k else total
                e[1] = np.logaddexp(e[1], src + row[k])
        ranked = sorted(nxt.items(), key=lambda kv: (-(np.logaddexp(kv[1][0], kv[1][1]) + kv[1][2]), kv[0]))
        beams = {p: tuple(v) for p, v in ranked[:beam]}
    return list(beams)


def beam_decode(log_probs, lm=None, beam=8, lm_weight=0.5, alphabet_size=None):
    """CTC prefix beam search with optional n-gram shallow fusion.

    Candidates are ranked by ``log P_ctc(prefix) + lm_weight * log P_lm(prefix)``
    during search.  The survivors of every width up to ``beam`` plus the greedy
    path are rescored exactly (including the LM end-of-sequence term) and the
    best is returned, so a wider beam never returns a worse-scoring sequence.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    V = lp.shape[1] if alphabet_size is None else alphabet_size
    candidates = {greedy_decode(lp).symbols}
    for width in range(1, beam + 1):
        candidates.update(_prefix_beam(lp, lm, width, lm_weight))
    best = max(sorted(candidates), key=lambda seq: _combined(lp, seq, lm, lm_weight))
    return LabelSequence(best, V)


def decode_score(log_probs, seq, lm=None, lm_weight=0.0):
    """The combined score ``beam_decode`` maximizes."""
    lp = np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)
    return _combined(lp, _symbols(seq), lm, lm_weight)
