"""Corpus-level smoothed BLEU-4.

Uniform weights over 1..4-gram modified precisions, brevity penalty
exp(1 - r/c) when the hypothesis corpus is shorter than the references,
and add-one smoothing on the n >= 2 precisions (the unigram precision is
left unsmoothed). Scores are on the 0..100 scale.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

MAX_ORDER = 4


class LengthMismatch(ValueError):
    pass


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def smoothed_bleu(hypotheses: Sequence[Sequence[str]],
                  references: Sequence[Sequence[str]]) -> float:
    """Corpus BLEU over paired token lists; returns a score in [0, 100]."""
    if len(hypotheses) != len(references):
        raise LengthMismatch(
            f"{len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not references:
        raise LengthMismatch("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            matches[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in hyp_counts.items()
            )
    if hyp_len == 0 or totals[0] == 0:
        return 0.0
    precisions = [matches[0] / totals[0]]
    precisions += [
        (matches[n] + 1.0) / (totals[n] + 1.0) for n in range(1, MAX_ORDER)
    ]
    if precisions[0] == 0.0:
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / MAX_ORDER
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_mean)


def sentence_bleu(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """Single-pair convenience wrapper around the corpus score."""
    return smoothed_bleu([hypothesis], [reference])
