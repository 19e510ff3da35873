"""WER/CER scoring and the vanilla-vs-adversarial classifier probe."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .ctc import beam_decode, greedy_decode
from .metrics import edit_distance
from .models import CS, MONO, Model, ModelKind, transfer_shared
from .synth import split_words
from .trainer import batches, discriminator_accuracy, sgd_step, zero_grad, TrainConfig


class ProbeError(ValueError):
    pass


@dataclass
class ScoreReport:
    split: str
    decode_mode: str
    utterances: int = 0
    word_sub: int = 0
    word_ins: int = 0
    word_del: int = 0
    ref_words: int = 0
    char_sub: int = 0
    char_ins: int = 0
    char_del: int = 0
    ref_chars: int = 0

    @property
    def wer(self):
        return (self.word_sub + self.word_ins + self.word_del) / self.ref_words if self.ref_words else 0.0

    @property
    def cer(self):
        return (self.char_sub + self.char_ins + self.char_del) / self.ref_chars if self.ref_chars else 0.0

    def add(self, ref_symbols, hyp_symbols):
        s, i, d = edit_distance(split_words(ref_symbols), split_words(hyp_symbols))
        self.word_sub += s
        self.word_ins += i
        self.word_del += d
        self.ref_words += len(split_words(ref_symbols))
        s, i, d = edit_distance(ref_symbols, hyp_symbols)
        self.char_sub += s
        self.char_ins += i
        self.char_del += d
        self.ref_chars += len(ref_symbols)
        self.utterances += 1


REPORT_FIELDS = ("split", "decode_mode", "utterances", "wer", "cer", "word_sub", "word_ins",
                 "word_del", "ref_words", "char_sub", "char_ins", "char_del", "ref_chars")


def reports_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in reports:
        w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k)
                    for k in REPORT_FIELDS])
    return buf.getvalue()


def reports_table(reports):
    lines = [f"{'split':<12}{'decode':<10}{'WER%':>8}{'CER%':>8}{'utts':>6}"]
    for r in reports:
        lines.append(f"{r.split:<12}{r.decode_mode:<10}{100 * r.wer:>8.2f}{100 * r.cer:>8.2f}{r.utterances:>6}")
    return "\n".join(lines) + "\n"


def decode_hypotheses(model, utts, decode="greedy", lm=None, beam=8, lm_weight=0.5, batch_size=32):
    """Decoded symbol tuples, one per utterance.

    Single-head models decode utterances of either task; the multi-task model
    routes each utterance to its ground-truth task head.
    """
    cross = model.kind is not ModelKind.MULTITASK_ADV
    hyps = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        for lp in model.batch_log_probs(chunk, allow_cross_task=cross):
            if decode == "greedy":
                hyps.append(greedy_decode(lp).symbols)
            elif decode == "beam":
                hyps.append(beam_decode(lp, lm, beam, lm_weight).symbols)
            else:
                raise ValueError(f"unknown decode mode {decode!r}")
    return hyps


def score_model(model, utts, split="test", decode="greedy", lm=None, beam=8, lm_weight=0.5):
    """Corpus-level WER and CER: edit counts summed over utterances, divided by total reference length."""
    if decode == "beam" and lm is None and lm_weight:
        raise ValueError("beam decoding with lm_weight > 0 needs a language model")
    report = ScoreReport(split, "greedy" if decode == "greedy" else "beam+lm")
    for u, hyp in zip(utts, decode_hypotheses(model, utts, decode, lm, beam, lm_weight)):
        report.add(u.transcript.symbols, hyp)
    return report


# -- classifier probe ------------------------------------------------------------

@dataclass
class ProbeResult:
    epochs: list = field(default_factory=list)
    vanilla: list = field(default_factory=list)
    adversarial: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "vanilla_acc", "adversarial_acc"))
        for row in zip(self.epochs, self.vanilla, self.adversarial):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()


def _probe_model(source, feature_dim, vocab_size, seed):
    if isinstance(source, Model):
        cfg = source.config
    else:
        from .models import read_checkpoint, ModelConfig
        header, _ = read_checkpoint(source)
        cfg = ModelConfig(**header["model"])
    from dataclasses import replace
    cfg = replace(cfg, kind=ModelKind.ADV_POOLED, seed=seed)
    if cfg.feature_dim != feature_dim or cfg.vocab_size != vocab_size:
        raise ProbeError("encoder checkpoint does not match the corpus feature dim / alphabet")
    return transfer_shared(source, cfg)


def probe_curve(model, train, dev, epochs, learning_rate, batch_size, seed, grl_scale=1.0):
    """Train encoder + discriminator on MONO/CS classification only; dev accuracy per epoch.

    ``grl_scale=1`` is the adversarial discriminator.  ``grl_scale=-1`` passes
    gradients through unchanged, i.e. an ordinary (vanilla) classifier.
    """
    model.set_grl_scale(grl_scale)
    params = {**model.partition.shared, **model.partition.discriminator}
    cfg = TrainConfig(learning_rate=learning_rate, epochs=max(epochs, 1), batch_size=batch_size, seed=seed)
    curve = []
    for epoch in range(1, epochs + 1):
        for batch in batches(train, cfg, epoch):
            zero_grad(params)
            with Tape() as tape:
                enc = model.encode(batch)
                loss = ad.mul(model.adversarial_loss(enc), 1.0 / len(batch))
            tape.backward(loss)
            sgd_step(params, learning_rate)
        curve.append(discriminator_accuracy(model, dev))
    return curve


# The reversed encoder moves at half the discriminator's rate.  With equal rates
# the two overshoot each other and dev accuracy swings well below chance.
PROBE_DEFAULTS = dict(learning_rate=0.5, adversarial_scale=0.5)


def run_probe(encoder, corpus, epochs=20, seed=0, learning_rate=PROBE_DEFAULTS["learning_rate"], batch_size=16,
              adversarial_scale=PROBE_DEFAULTS["adversarial_scale"]):
    """Train the shared stack twice from the same encoder and seed: once as a plain
    MONO/CS classifier, once with the gradient reversal in place."""
    train = [u for u in corpus["train"]]
    dev = [u for u in corpus["dev"]]
    for name, split in (("train", train), ("dev", dev)):
        tasks = {u.task for u in split}
        if tasks != {MONO, CS}:
            raise ProbeError(f"probe needs both MONO and CS utterances in {name}, found {sorted(tasks)}")
    result = ProbeResult(epochs=list(range(1, epochs + 1)))
    V, D = corpus.vocab_size, corpus.config.feature_dim
    vanilla = _probe_model(encoder, D, V, seed)
    result.vanilla = probe_curve(vanilla, train, dev, epochs, learning_rate, batch_size, seed, grl_scale=-1.0)
    adv = _probe_model(encoder, D, V, seed)
    result.adversarial = probe_curve(adv, train, dev, epochs, learning_rate, batch_size, seed,
                                     grl_scale=adversarial_scale)
    return result


def moving_average(values, window=3):
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def probe_verdicts(result, band=(0.35, 0.65), settle_epochs=2, vanilla_floor=0.9):
    """Pass/fail checks of the probe's qualitative shape; None when there are too few epochs."""
    if len(result.epochs) <= settle_epochs:
        return None
    adv_tail = result.adversarial[settle_epochs:]
    tail = result.adversarial[int(np.ceil(0.2 * len(result.adversarial))):]
    ma = moving_average(result.vanilla)
    return {
        "vanilla_final_above_floor": result.vanilla[-1] > vanilla_floor,
        "adversarial_near_chance": all(band[0] <= a <= band[1] for a in adv_tail),
        "adversarial_flat": (max(tail) - min(tail)) < 0.15,
        "vanilla_trend_nondecreasing": bool(np.all(np.diff(ma) >= -1e-12)),
    }
