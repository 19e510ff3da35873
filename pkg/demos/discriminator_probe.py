"""
Does the reversal layer hide the task identity?
===============================================

Starting from a pooled encoder we train a MONO-vs-CS classifier twice: once
as an ordinary classifier, once behind the gradient reversal layer.  The
ordinary classifier should learn the task quickly; the adversarial one
should hover around chance because the encoder keeps erasing the cue.
"""

import tempfile

from advasr.evaluator import probe_verdicts, run_probe
from advasr.models import ModelKind
from advasr.synth import SynthConfig, generate_corpus
from advasr.trainer import TRAIN_PRESETS, TrainConfig, build_model, train

corpus = generate_corpus(SynthConfig(seed=0))
cfg = TrainConfig(**TRAIN_PRESETS["desk"], kind=ModelKind.POOLED)
pooled = train(build_model(cfg, corpus), corpus, cfg, tempfile.mkdtemp())

probe = run_probe(pooled.best_checkpoint, corpus, epochs=20, seed=0)
print("epoch  vanilla  adversarial")
for e, v, a in zip(probe.epochs, probe.vanilla, probe.adversarial):
    print(f"{e:>5}  {v:7.3f}  {a:11.3f}")
print(probe_verdicts(probe))
