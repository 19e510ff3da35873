"""
Pooled, adversarial and multi-task models on synthetic code-switching data
==========================================================================

A synthetic corpus stands in for monolingual (MONO) and code-switched (CS)
speech: two disjoint grapheme alphabets, Gaussian frame prototypes, and a
task-specific channel offset.  We train the pooled model first, then start
the adversarial variants from its encoder, as the recipe prescribes.

This takes a few minutes on one core.  The full five-seed comparison is
``advasr suite --seeds 5``.
"""

import tempfile

from advasr.evaluator import score_model
from advasr.models import CS, MONO, ModelKind
from advasr.synth import SynthConfig, corpus_stats, generate_corpus
from advasr.trainer import SUITE_FINETUNE_EPOCHS, TRAIN_PRESETS, TrainConfig, build_model, train

corpus = generate_corpus(SynthConfig(seed=0))
cs = [u for u in corpus["train"] if u.task == CS]
print("train utterances:", len(corpus["train"]), "CS CMI:", round(corpus_stats(cs).mean_cmi, 2))

out = tempfile.mkdtemp()
desk = TRAIN_PRESETS["desk"]

###############################################################################
# Exp3: one head trained on the union of MONO and CS data.

pooled_cfg = TrainConfig(**desk, kind=ModelKind.POOLED)
pooled = train(build_model(pooled_cfg, corpus), corpus, pooled_cfg, f"{out}/exp3")

###############################################################################
# Exp5 and Exp6 copy the pooled encoder, add the discriminator behind a
# gradient reversal layer, and keep training.  The desk suite gives them 40
# more epochs.  Continuing the pooled model for as long closes much of the
# gap, so part of what this shows is simply extra training.

results = {"exp3": pooled.model}
for name, kind in (("exp5", ModelKind.ADV_POOLED), ("exp6", ModelKind.MULTITASK_ADV)):
    cfg = TrainConfig(**{**desk, "epochs": SUITE_FINETUNE_EPOCHS["desk"]}, kind=kind,
                      init_from=pooled.best_checkpoint)
    results[name] = train(build_model(cfg, corpus), corpus, cfg, f"{out}/{name}").model

for name, model in results.items():
    cells = []
    for task in (MONO, CS):
        test = [u for u in corpus["test"] if u.task == task]
        rep = score_model(model, test, split=task)
        cells.append(f"{task} CER {100 * rep.cer:5.2f}%  WER {100 * rep.wer:5.2f}%")
    print(name, " | ".join(cells))
