"""
CTC loss, greedy and beam decoding
==================================

The CTC loss sums over every frame labelling that collapses to the target.
For tiny inputs that sum can be enumerated outright, which is how the
forward-backward implementation is checked.
"""

import numpy as np

from advasr.autodiff import Tensor
from advasr.ctc import LabelSequence, beam_decode, ctc_brute_force, ctc_loss, greedy_decode, train_ngram

rng = np.random.default_rng(1)
z = rng.normal(size=(5, 4)) * 2
log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
target = LabelSequence([1, 3, 3], alphabet_size=4)

print("forward-backward:", ctc_loss(Tensor(log_probs), target).item())
print("enumeration     :", ctc_brute_force(log_probs, target))

###############################################################################
# Greedy decoding takes the best symbol per frame, merges repeats and drops
# blanks.  Prefix beam search keeps several prefixes alive and can add an
# n-gram language model score.

print("greedy:", greedy_decode(log_probs).symbols)
print("beam  :", beam_decode(log_probs, beam=8, lm_weight=0.0).symbols)

corpus = [LabelSequence(s, 4) for s in ([1, 3, 3], [1, 3], [2, 3, 3], [1, 3, 3, 1])]
lm = train_ngram(corpus, order=2, add_k=0.1)
print("beam+lm:", beam_decode(log_probs, lm, beam=8, lm_weight=0.8).symbols)
