"""Plain-SGD training loop, metric CSVs, and the Exp1/2/3/5/6 suite."""
from __future__ import annotations

import csv
import io
import logging
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .ctc import greedy_decode, required_length
from .layers import SequenceTooShortError
from .metrics import error_rate
from .models import CS, MONO, PRESETS, Model, ModelConfig, ModelKind, save_checkpoint, transfer_shared

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "loss_task_mono", "loss_task_cs", "loss_adv",
                 "dev_cer_mono", "dev_cer_cs", "disc_acc", "seconds")


class TrainConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


class StageError(RuntimeError):
    """A suite stage failed; the message names the experiment and seed."""


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    kind: ModelKind = ModelKind.POOLED
    init_from: str = None
    shuffle: bool = True
    # wall-clock seconds in the CSV would break byte-identical reruns
    record_wall_clock: bool = False
    keep_epoch_checkpoints: bool = False

    def __post_init__(self):
        self.kind = ModelKind(self.kind)
        if not self.learning_rate > 0:
            raise TrainConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise TrainConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


# "paper": full-scale recipe (SGD, lr 3e-4, 40 epochs, batch 64).  desk: small model, faster lr.
TRAIN_PRESETS = {
    "paper": dict(learning_rate=3e-4, epochs=40, batch_size=64),
    "desk": dict(learning_rate=0.1, epochs=20, batch_size=16),
}

# Exp5/Exp6 epochs on top of the Exp3 checkpoint in the experiment suite
SUITE_FINETUNE_EPOCHS = {"paper": None, "desk": 40}


@dataclass
class MetricRecord:
    epoch: int
    loss_task_mono: float = None
    loss_task_cs: float = None
    loss_adv: float = None
    dev_cer_mono: float = None
    dev_cer_cs: float = None
    disc_acc: float = None
    seconds: float = None
    skipped: int = 0

    def row(self):
        return ["" if getattr(self, k) is None else repr(getattr(self, k)) for k in METRIC_FIELDS]


def metrics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


@dataclass
class TrainResult:
    model: Model
    metrics: list
    best_epoch: int
    checkpoint: str = None
    best_checkpoint: str = None
    metrics_path: str = None
    skipped: int = 0


def zero_grad(params):
    for p in params.values():
        p.grad = np.zeros(p.shape)


def sgd_step(params, learning_rate):
    """theta <- theta - lr * grad for every tensor; the GRL already put the adversarial sign into grad."""
    if hasattr(params, "all"):
        params = params.all()
    for name, p in params.items():
        if p.grad is None:
            raise TrainConfigError(f"no gradient for trainable tensor {name!r}")
    for p in params.values():
        p.data = p.data - learning_rate * p.grad
    return params


def feasible(model, utt):
    try:
        out = model.output_length(utt.features.shape[0])
    except SequenceTooShortError:
        return False
    return out >= required_length(utt.transcript)


def batches(utts, cfg, epoch):
    order = sorted(utts, key=lambda u: u.id)
    if cfg.shuffle:
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(epoch)]))
        order = [order[i] for i in rng.permutation(len(order))]
    for start in range(0, len(order), cfg.batch_size):
        # fixed accumulation order inside a batch
        yield sorted(order[start:start + cfg.batch_size], key=lambda u: u.id)


def decode_cer(model, utts, allow_cross_task=False, batch_size=32):
    pairs = []
    for start in range(0, len(utts), batch_size):
        chunk = utts[start:start + batch_size]
        for u, lp in zip(chunk, model.batch_log_probs(chunk, allow_cross_task)):
            pairs.append((u.transcript.symbols, greedy_decode(lp).symbols))
    return error_rate(pairs)


def discriminator_accuracy(model, utts):
    p = model.discriminator_probs(utts)
    y = np.array([u.task == CS for u in utts])
    return float(np.mean((p > 0.5) == y))


def evaluate_dev(model, dev, record):
    cers = []
    for task, attr in ((MONO, "dev_cer_mono"), (CS, "dev_cer_cs")):
        subset = [u for u in dev if u.task == task]
        if task in model.kind.tasks and subset:
            cer = decode_cer(model, subset)
            setattr(record, attr, cer)
            cers.append(cer)
    if model.discriminator is not None and dev:
        record.disc_acc = discriminator_accuracy(model, dev)
    return float(np.mean(cers)) if cers else float("inf")


def train_epoch(model, utts, cfg, epoch):
    """One pass of SGD; returns (loss sums per term, counts per term)."""
    sums = {"MONO": 0.0, "CS": 0.0, "ADV": 0.0}
    counts = {"MONO": 0, "CS": 0, "ADV": 0}
    params = model.params
    for batch in batches(utts, cfg, epoch):
        zero_grad(params)
        with Tape() as tape:
            terms = model.loss_terms(batch)
            loss = ad.mul(_sum_terms(terms), 1.0 / len(batch))
        tape.backward(loss)
        sgd_step(params, cfg.learning_rate)
        for key, t in terms.items():
            sums[key] += t.item()
        for u in batch:
            counts[u.task] += 1
        if "ADV" in terms:
            counts["ADV"] += len(batch)
    return sums, counts


def _sum_terms(terms):
    keys = [k for k in ("MONO", "CS", "ADV") if k in terms]
    out = terms[keys[0]]
    for k in keys[1:]:
        out = ad.add(out, terms[k])
    return out


def train(model, corpus, cfg, out_dir=None):
    """Train ``model`` on ``corpus['train']``; returns the best-dev model and per-epoch metrics."""
    train_utts = [u for u in corpus["train"] if u.task in model.kind.tasks]
    dev_utts = [u for u in corpus.splits.get("dev", []) if u.task in model.kind.tasks]
    usable = []
    skipped = 0
    for u in train_utts:
        if feasible(model, u):
            usable.append(u)
        else:
            skipped += 1
            log.warning("skipping %s: %d frames cannot carry %d labels through the encoder",
                        u.id, u.features.shape[0], len(u.transcript))
    if not usable:
        raise TrainConfigError(f"no trainable utterances for {model.kind.value}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    records = []
    best = (float("inf"), 0, None)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums, counts = train_epoch(model, usable, cfg, epoch)
        rec = MetricRecord(epoch, skipped=skipped)
        rec.loss_task_mono = sums["MONO"] / counts["MONO"] if counts["MONO"] else None
        rec.loss_task_cs = sums["CS"] / counts["CS"] if counts["CS"] else None
        rec.loss_adv = sums["ADV"] / counts["ADV"] if counts["ADV"] else None
        score = evaluate_dev(model, dev_utts, rec) if dev_utts else -epoch
        if cfg.record_wall_clock:
            rec.seconds = round(time.perf_counter() - t0, 3)
        records.append(rec)
        if score < best[0]:
            best = (score, epoch, {k: p.data.copy() for k, p in model.params.items()})
        if out_dir:
            save_checkpoint(model, os.path.join(out_dir, "last.ckpt"))
            if cfg.keep_epoch_checkpoints:
                save_checkpoint(model, os.path.join(out_dir, f"epoch-{epoch:03d}.ckpt"))
    _, best_epoch, best_params = best
    for name, p in model.params.items():
        p.data = best_params[name]
    result = TrainResult(model, records, best_epoch, skipped=skipped)
    if out_dir:
        result.checkpoint = os.path.join(out_dir, "last.ckpt")
        result.best_checkpoint = os.path.join(out_dir, "best.ckpt")
        save_checkpoint(model, result.best_checkpoint)
        result.metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(result.metrics_path, "w") as f:
            f.write(metrics_csv(records))
    return result


def build_model(cfg, corpus, preset="desk", **model_overrides):
    """Fresh model for ``cfg.kind``, or one whose encoder comes from ``cfg.init_from``."""
    params = dict(PRESETS[preset])
    params.update(model_overrides)
    mcfg = ModelConfig(kind=cfg.kind, feature_dim=corpus.config.feature_dim,
                       vocab_size=corpus.vocab_size, seed=cfg.seed, **params)
    if cfg.kind.adversarial and cfg.init_from is None:
        raise DependencyError(f"{cfg.kind.value} must be initialized from a pooled (Exp3) checkpoint")
    if cfg.init_from is not None:
        if not os.path.exists(cfg.init_from):
            raise DependencyError(f"init_from checkpoint {cfg.init_from} does not exist")
        return transfer_shared(cfg.init_from, mcfg)
    return Model(mcfg)


# -- experiment suite ------------------------------------------------------------

EXPERIMENTS = {
    "exp1": ModelKind.BASELINE_MONO,
    "exp2": ModelKind.BASELINE_CS,
    "exp3": ModelKind.POOLED,
    "exp5": ModelKind.ADV_POOLED,
    "exp6": ModelKind.MULTITASK_ADV,
}
ORDER = ("exp1", "exp2", "exp3", "exp5", "exp6")
NEEDS_EXP3 = ("exp5", "exp6")


@dataclass
class SuiteResult:
    # rows of dicts: seed, experiment, split, cer, wer
    rows: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)

    def values(self, experiment, split, metric="cer"):
        return [r[metric] for r in self.rows if r["experiment"] == experiment and r["split"] == split]

    def median(self, experiment, split, metric="cer"):
        return statistics.median(self.values(experiment, split, metric))

    def experiments(self):
        return [e for e in ORDER if any(r["experiment"] == e for r in self.rows)]

    def seeds(self):
        return sorted({r["seed"] for r in self.rows})


def run_experiment(name, corpus, train_cfg, out_dir=None, preset="desk", init_from=None, epochs=None):
    from .evaluator import score_model

    kind = EXPERIMENTS[name]
    cfg = replace(train_cfg, kind=kind, init_from=init_from if name in NEEDS_EXP3 else None,
                  epochs=epochs or train_cfg.epochs)
    model = build_model(cfg, corpus, preset)
    result = train(model, corpus, cfg, out_dir)
    scores = {}
    for task in (MONO, CS):
        test = [u for u in corpus["test"] if u.task == task]
        scores[task] = score_model(result.model, test, split=f"test-{task.lower()}")
    return result, scores


def run_experiment_suite(suite, corpus_factory, train_cfg, seeds=(0,), out_dir=None, preset="desk",
                         finetune_epochs=None, checkpoints=None):
    """Run experiments in dependency order (Exp3 before Exp5/Exp6) for every seed.

    ``corpus_factory(seed)`` returns the corpus for that seed.  ``checkpoints``
    maps seed -> existing Exp3 checkpoint, for running Exp5/Exp6 alone.
    """
    suite = [s.lower() for s in suite]
    unknown = set(suite) - set(EXPERIMENTS)
    if unknown:
        raise ValueError(f"unknown experiments {sorted(unknown)}; choose from {list(EXPERIMENTS)}")
    out = SuiteResult()
    for seed in seeds:
        corpus = corpus_factory(seed)
        cfg = replace(train_cfg, seed=train_cfg.seed + seed)
        exp3_ckpt = (checkpoints or {}).get(seed)
        tmp = None
        for name in ORDER:
            if name not in suite:
                continue
            if name in NEEDS_EXP3 and exp3_ckpt is None:
                raise DependencyError(f"{name} needs the Exp3 pooled checkpoint; include exp3 in the suite")
            run_dir = os.path.join(out_dir, f"seed{seed}", name) if out_dir else None
            if name == "exp3" and run_dir is None:
                import tempfile
                tmp = tempfile.TemporaryDirectory()
                run_dir = tmp.name
            try:
                result, scores = run_experiment(name, corpus, cfg, run_dir, preset, exp3_ckpt,
                                                finetune_epochs if name in NEEDS_EXP3 else None)
            except DependencyError:
                raise
            except Exception as exc:
                raise StageError(f"stage {name} (seed {seed}) failed: {exc}") from exc
            if name == "exp3":
                exp3_ckpt = result.best_checkpoint
            out.checkpoints[(seed, name)] = result.best_checkpoint
            for task, rep in scores.items():
                out.rows.append({"seed": seed, "experiment": name, "split": task,
                                 "cer": rep.cer, "wer": rep.wer})
        if tmp is not None:
            tmp.cleanup()
    return out


def suite_table(result, metric="cer"):
    """Text results table: one row per test split, one column per experiment.

    Cells are percentages; with several seeds they are medians.
    """
    exps = result.experiments()
    lines = ["\t".join(["split"] + [e.upper() for e in exps])]
    for split in (MONO, CS):
        cells = [f"test-{split.lower()}"]
        cells += [f"{100 * result.median(e, split, metric):.2f}" for e in exps]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
