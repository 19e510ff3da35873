"""Levenshtein alignment counts and error rates."""
from __future__ import annotations

import numpy as np


def edit_distance(ref, hyp):
    """Minimal (substitutions, insertions, deletions) turning ``ref`` into ``hyp``.

    Among minimal alignments the backtrace prefers a diagonal step, so a
    mismatch is counted as one substitution rather than an insert/delete pair.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = I = D = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return int(S), int(I), int(D)


def error_rate(pairs):
    """Corpus-level rate: total edits over total reference length."""
    edits = ref_len = 0
    for ref, hyp in pairs:
        s, i, d = edit_distance(ref, hyp)
        edits += s + i + d
        ref_len += len(ref)
    return edits / ref_len if ref_len else 0.0
