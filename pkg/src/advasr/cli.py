"""Command line entry point: ``advasr {synth,train,eval,probe,suite}``.

All commands read one YAML config with per-command sections (``synth``,
``model``, ``train``, ``eval``, ``probe``, ``suite``); flags override file
values.  Artifacts go under ``--out``, or ``$ADVASR_OUTPUT_ROOT/<command>``
when ``--out`` is absent, next to a ``manifest.json`` that echoes the
resolved config.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import os
import sys

import yaml

from . import __version__
from .ctc import load_lm, save_lm, train_ngram
from .evaluator import PROBE_DEFAULTS, probe_verdicts, reports_csv, reports_table, run_probe, score_model
from .models import CS, MONO, PRESETS, ModelKind, load_checkpoint
from .synth import SPLITS, SynthConfig, SynthConfigError, corpus_stats, generate_corpus, load_corpus, save_corpus
from .trainer import (EXPERIMENTS, ORDER, SUITE_FINETUNE_EPOCHS, TRAIN_PRESETS, DependencyError, TrainConfig, TrainConfigError,
                      build_model, run_experiment_suite, suite_table, train)

OUTPUT_ROOT_ENV = "ADVASR_OUTPUT_ROOT"
SECTIONS = ("synth", "model", "train", "eval", "probe", "suite")


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


def load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}; expected {list(SECTIONS)}")
    for name, section in raw.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"{path}: section {name!r} must be a mapping")
    return {k: dict(v or {}) for k, v in raw.items()}


def _build(cls, section, values, required=()):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {sorted(unknown)}")
    for name in required:
        if values.get(name) is None:
            raise ConfigError(f"{section}: missing required field {name!r}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def synth_config(cfg, seed=None):
    values = dict(cfg.get("synth", {}))
    if seed is not None:
        values["seed"] = seed
    out = _build(SynthConfig, "synth", values, required=("seed",))
    try:
        out.validate()
    except SynthConfigError as exc:
        raise ConfigError(f"synth: {exc}") from exc
    return out


def train_config(cfg, preset, seed=None, **overrides):
    values = dict(TRAIN_PRESETS[preset])
    values.update(cfg.get("train", {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    if seed is not None:
        values["seed"] = seed
    try:
        return _build(TrainConfig, "train", values)
    except TrainConfigError as exc:
        raise ConfigError(str(exc)) from exc


def model_overrides(cfg):
    values = dict(cfg.get("model", {}))
    allowed = set(PRESETS["desk"])
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"model: unknown field(s) {sorted(unknown)}; allowed {sorted(allowed)}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}


def output_dir(args):
    if args.out:
        path = args.out
    else:
        path = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), args.command)
    os.makedirs(path, exist_ok=True)
    return path


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, ModelKind):
        return obj.value
    return obj


def write_manifest(out, args, resolved, artifacts, started):
    manifest = {
        "command": args.command,
        "config_path": os.path.abspath(args.config) if args.config else None,
        "resolved": _jsonable(resolved),
        "seed": args.seed,
        "preset": args.preset,
        "artifacts": sorted(os.path.relpath(a, out) for a in artifacts),
        "started": started,
        "finished": _now(),
        "version": __version__,
    }
    for a in artifacts:
        if not os.path.exists(a):
            raise RuntimeError(f"expected artifact {a} was not written")
    path = os.path.join(out, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def _corpus(path):
    if not path:
        raise UsageError("--corpus is required (a directory written by `advasr synth`)")
    if not os.path.isdir(path):
        raise FileNotFoundError(f"corpus directory {path} does not exist")
    return load_corpus(path)


# -- commands --------------------------------------------------------------------

def cmd_synth(args, cfg):
    scfg = synth_config(cfg, args.seed)
    out = output_dir(args)
    corpus = generate_corpus(scfg)
    artifacts = save_corpus(corpus, out)
    lm = train_ngram([u.transcript for u in corpus["train"]], order=3, add_k=0.1,
                     alphabet_size=corpus.vocab_size)
    lm_path = os.path.join(out, "lm.txt")
    save_lm(lm, lm_path)
    artifacts.append(lm_path)
    print(f"{'split':<6}{'utts':>6}{'tokens':>8}{'CMI':>8}{'MONO':>6}{'CS':>6}")
    for split in SPLITS:
        st = corpus_stats(corpus[split])
        print(f"{split:<6}{st.utterance_count:>6}{st.total_tokens:>8}{st.mean_cmi:>8.2f}"
              f"{st.task_balance[MONO]:>6}{st.task_balance[CS]:>6}")
    cs = [u for u in corpus["train"] if u.task == CS]
    print(f"train CS CMI: {corpus_stats(cs).mean_cmi:.2f}")
    write_manifest(out, args, {"synth": scfg}, artifacts, args.started)
    return 0


def cmd_train(args, cfg):
    cfg = {k: dict(v) for k, v in cfg.items()}
    section = cfg.setdefault("train", {})
    name = (args.experiment or section.pop("experiment", "exp3")).lower()
    section.pop("experiment", None)
    corpus_path = args.corpus or section.get("corpus")
    section.pop("corpus", None)
    if name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; choose from {list(EXPERIMENTS)}")
    kind = EXPERIMENTS[name]
    tcfg = train_config(cfg, args.preset, args.seed, kind=kind, init_from=args.init_from,
                        epochs=args.epochs, learning_rate=args.learning_rate)
    corpus = _corpus(corpus_path)
    model = build_model(tcfg, corpus, args.preset, **model_overrides(cfg))
    out = output_dir(args)
    result = train(model, corpus, tcfg, out)
    last = result.metrics[result.best_epoch - 1]
    print(f"{name} ({kind.value}) best epoch {result.best_epoch}/{tcfg.epochs}")
    for task, value in ((MONO, last.dev_cer_mono), (CS, last.dev_cer_cs)):
        if value is not None:
            print(f"dev CER {task}: {100 * value:.2f}%")
    if result.skipped:
        print(f"skipped {result.skipped} infeasible training utterances")
    artifacts = [result.checkpoint, result.best_checkpoint, result.metrics_path]
    write_manifest(out, args, {"experiment": name, "train": tcfg, "model": model.config,
                               "skipped_utterances": result.skipped}, artifacts, args.started)
    return 0


def cmd_eval(args, cfg):
    section = dict(cfg.get("eval", {}))
    decode = args.decode or section.get("decode", "greedy")
    lm_path = args.lm or section.get("lm")
    beam = args.beam or section.get("beam", 8)
    lm_weight = args.lm_weight if args.lm_weight is not None else section.get("lm_weight", 0.5)
    if decode == "beam" and not lm_path:
        raise UsageError("--decode beam requires --lm PATH (an n-gram file written by `advasr synth`)")
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model = load_checkpoint(args.checkpoint)
    corpus = _corpus(args.corpus)
    split = args.split or section.get("split", "test")
    if split not in corpus.splits:
        raise UsageError(f"split {split!r} not found; available {sorted(corpus.splits)}")
    lm = load_lm(lm_path) if lm_path else None
    reports = []
    for task in (MONO, CS):
        utts = [u for u in corpus[split] if u.task == task]
        if utts:
            reports.append(score_model(model, utts, f"{split}-{task.lower()}", decode, lm, beam, lm_weight))
    out = output_dir(args)
    tag = "greedy" if decode == "greedy" else "beam"
    csv_path = os.path.join(out, f"report-{tag}.csv")
    txt_path = os.path.join(out, f"report-{tag}.txt")
    with open(csv_path, "w") as f:
        f.write(reports_csv(reports))
    table = reports_table(reports)
    with open(txt_path, "w") as f:
        f.write(table)
    print(table, end="")
    resolved = {"checkpoint": os.path.abspath(args.checkpoint), "split": split, "decode": decode,
                "lm": lm_path, "beam": beam, "lm_weight": lm_weight}
    write_manifest(out, args, resolved, [csv_path, txt_path], args.started)
    return 0


def cmd_probe(args, cfg):
    section = dict(cfg.get("probe", {}))
    epochs = args.epochs or section.get("epochs", 20)
    lr = args.learning_rate or section.get("learning_rate", PROBE_DEFAULTS["learning_rate"])
    batch_size = section.get("batch_size", 16)
    scale = section.get("adversarial_scale", PROBE_DEFAULTS["adversarial_scale"])
    seed = args.seed if args.seed is not None else section.get("seed", 0)
    corpus = _corpus(args.corpus)
    out = output_dir(args)
    artifacts = []
    encoder = args.checkpoint or section.get("checkpoint")
    if encoder is None:
        print("no --checkpoint given; training the pooled (Exp3) encoder first")
        tcfg = train_config(cfg, args.preset, seed, kind=ModelKind.POOLED)
        model = build_model(tcfg, corpus, args.preset, **model_overrides(cfg))
        res = train(model, corpus, tcfg, os.path.join(out, "exp3"))
        encoder = res.best_checkpoint
        artifacts += [res.best_checkpoint, res.metrics_path]
    result = run_probe(encoder, corpus, epochs=epochs, seed=seed, learning_rate=lr, batch_size=batch_size,
                        adversarial_scale=scale)
    path = os.path.join(out, "probe.csv")
    with open(path, "w") as f:
        f.write(result.to_csv())
    artifacts.append(path)
    print(result.to_csv(), end="")
    verdicts = probe_verdicts(result)
    if verdicts is None:
        print(f"warning: {epochs} epoch(s) is too few to judge the curves; no verdict")
    else:
        print(f"vanilla classifier ends above 0.9: {_pf(verdicts['vanilla_final_above_floor'])}")
        print(f"adversarial stays near chance: {_pf(verdicts['adversarial_near_chance'])}")
    write_manifest(out, args, {"encoder": encoder, "epochs": epochs, "learning_rate": lr,
                               "batch_size": batch_size, "adversarial_scale": scale, "seed": seed,
                               "verdicts": verdicts},
                   artifacts, args.started)
    return 0


def _pf(ok):
    return "PASS" if ok else "FAIL"


def suite_verdicts(result):
    """Ordering checks on median CER; only those whose experiments were run."""
    exps = set(result.experiments())
    m = result.median
    lines = []
    if {"exp1", "exp2", "exp3"} <= exps:
        ok = m("exp1", MONO) < m("exp2", MONO) and m("exp2", CS) < m("exp1", CS)
        lines.append(f"Exp1 beats Exp2 on MONO and Exp2 beats Exp1 on CS: {_pf(ok)}")
        ok = all(m("exp3", s) <= min(m("exp1", s), m("exp2", s)) for s in (MONO, CS))
        lines.append(f"Exp3 <= Exp1, Exp2 on both splits: {_pf(ok)}")
    if {"exp3", "exp6"} <= exps:
        lines.append(f"Exp6 <= Exp3 on both splits: {_pf(all(m('exp6', s) <= m('exp3', s) for s in (MONO, CS)))}")
    if {"exp3", "exp5", "exp6"} <= exps:
        ok = all(m("exp6", s) <= m("exp5", s) <= m("exp3", s) for s in (MONO, CS))
        ok = ok and any(m("exp6", s) <= 0.98 * m("exp3", s) for s in (MONO, CS))
        lines.append(f"Exp6 <= Exp5 <= Exp3 on both splits, Exp6 2% better than Exp3 on one: {_pf(ok)}")
    return lines


def per_seed_table(result, metric="cer"):
    exps = result.experiments()
    lines = ["\t".join(["seed", "split"] + [e.upper() for e in exps])]
    for seed in result.seeds():
        for split in (MONO, CS):
            cells = [str(seed), f"test-{split.lower()}"]
            for e in exps:
                v = [r[metric] for r in result.rows if r["seed"] == seed and r["experiment"] == e and r["split"] == split]
                cells.append(f"{100 * v[0]:.2f}")
            lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_suite(args, cfg):
    section = dict(cfg.get("suite", {}))
    seeds = section.get("seeds", 1) if args.seeds is None else args.seeds
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    experiments = [e.lower() for e in section.get("experiments", ORDER)]
    # --epochs overrides every stage; otherwise the preset decides the fine-tune length
    finetune = section.get("finetune_epochs", None if args.epochs else SUITE_FINETUNE_EPOCHS[args.preset])
    base_seed = args.seed if args.seed is not None else cfg.get("synth", {}).get("seed", 0)
    synth_values = dict(cfg.get("synth", {}))
    synth_values.pop("seed", None)
    scfg = _build(SynthConfig, "synth", {**synth_values, "seed": base_seed})
    tcfg = train_config(cfg, args.preset, base_seed, epochs=args.epochs)
    out = output_dir(args)

    def corpus_for(seed):
        corpus_dir = os.path.join(out, f"seed{seed}", "corpus")
        if os.path.exists(os.path.join(corpus_dir, "train.bin")):
            return load_corpus(corpus_dir)
        corpus = generate_corpus(dataclasses.replace(scfg, seed=base_seed + seed))
        save_corpus(corpus, corpus_dir)
        return corpus

    result = run_experiment_suite(experiments, corpus_for, tcfg, seeds=seeds, out_dir=out,
                                  preset=args.preset, finetune_epochs=finetune)
    table = suite_table(result)
    if len(seeds) == 1:
        headline = [e for e in ("exp3", "exp5", "exp6") if e in result.experiments()]
        rows = [r for r in result.rows if r["experiment"] in headline]
        text = "experiment\tsplit\tCER%\tWER%\n" + "".join(
            f"{r['experiment'].upper()}\ttest-{r['split'].lower()}\t{100 * r['cer']:.2f}\t{100 * r['wer']:.2f}\n"
            for r in rows)
    else:
        text = per_seed_table(result) + "\nmedian over seeds\n" + table
    verdicts = suite_verdicts(result)
    text += "\n" + "\n".join(verdicts) + "\n"
    print(text, end="")
    table_path = os.path.join(out, "results.txt")
    with open(table_path, "w") as f:
        f.write(text)
    rows_path = os.path.join(out, "results.json")
    with open(rows_path, "w") as f:
        json.dump(result.rows, f, indent=1, sort_keys=True)
    write_manifest(out, args, {"synth": scfg, "train": tcfg, "seeds": seeds, "experiments": experiments,
                               "finetune_epochs": finetune},
                   [table_path, rows_path], args.started)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "suite": cmd_suite}


def build_parser():
    parser = argparse.ArgumentParser(prog="advasr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"advasr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config with per-command sections")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default="desk")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("synth", help="generate a synthetic MONO/CS corpus"))

    p = common(sub.add_parser("train", help="train one experiment recipe"))
    p.add_argument("--corpus", help="corpus directory from `advasr synth`")
    p.add_argument("--experiment", choices=list(EXPERIMENTS))
    p.add_argument("--init-from", help="pooled (Exp3) checkpoint; required for exp5 and exp6")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)

    p = common(sub.add_parser("eval", help="score a checkpoint on one split"))
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", choices=list(SPLITS))
    p.add_argument("--decode", choices=["greedy", "beam"])
    p.add_argument("--lm", help="n-gram file, required for beam decoding")
    p.add_argument("--beam", type=int)
    p.add_argument("--lm-weight", type=float)

    p = common(sub.add_parser("probe", help="vanilla vs adversarial MONO/CS classifier curves"))
    p.add_argument("--checkpoint", help="encoder checkpoint; trains Exp3 first when absent")
    p.add_argument("--corpus")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)

    p = common(sub.add_parser("suite", help="run Exp1/2/3/5/6 across seeds and print the ordering verdicts"))
    p.add_argument("--seeds", type=int, help="number of seeds (overrides suite.seeds)")
    p.add_argument("--epochs", type=int)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.started = _now()
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, SynthConfigError, TrainConfigError) as exc:
        print(f"advasr {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"advasr {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"advasr {args.command}: dependency error: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"advasr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
