"""Text-overlap and binary-classification metrics.

Sequences are any ordered collection of hashable tokens (ids or strings).
"""
import math
from collections import Counter
from typing import Hashable, NamedTuple, Sequence

import numpy as np

from hallulrp import _kernels

TokenSeq = Sequence[Hashable]


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def sentence_bleu(hyp: TokenSeq, ref: TokenSeq, max_n: int = 4) -> float:
    """Smoothed sentence-level BLEU of ``hyp`` against a single ``ref``.

    Unigram precision is left unsmoothed, so a hypothesis sharing no token
    with the reference scores exactly 0. For n >= 2 the clipped match count
    and the candidate n-gram count both get +1 (add-one smoothing), which
    also makes orders longer than the hypothesis contribute a factor of 1.
    The brevity penalty is the usual exp(1 - r/c) for c <= r.
    """
    if len(hyp) == 0 or len(ref) == 0:
        raise ValueError("empty input")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    hyp = list(hyp)
    ref = list(ref)
    log_p = 0.0
    for n in range(1, max_n + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        matches = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        if n > 1:
            matches += 1
            total += 1
        if matches == 0:
            return 0.0
        log_p += math.log(matches / total)
    c, r = len(hyp), len(ref)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


def repetition_count(seq: TokenSeq, n_min: int = 2, n_max: int = 4) -> int:
    """Sum over n in [n_min, n_max] and distinct n-grams g of max(0, count(g) - 1)."""
    if n_min > n_max:
        raise ValueError("n_min must be <= n_max")
    seq = list(seq)
    total = 0
    for n in range(n_min, n_max + 1):
        total += sum(c - 1 for c in _ngrams(seq, n).values() if c > 1)
    return total


def is_degenerated(src: TokenSeq, out: TokenSeq, k: int = 3, n_min: int = 2, n_max: int = 4) -> bool:
    if k < 1:
        raise ValueError("k must be >= 1")
    return repetition_count(out, n_min, n_max) - repetition_count(src, n_min, n_max) >= k


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    no_predicted_positive: bool


def _as_binary(x, name):
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def binary_prf(labels, decisions) -> PRF:
    """Precision, recall and F1 of binary ``decisions`` against ``labels``.

    With no predicted positive the precision is reported as 0 and flagged.
    """
    labels = _as_binary(labels, "labels")
    decisions = _as_binary(decisions, "decisions")
    if labels.size == 0:
        raise ValueError("empty input")
    if labels.shape != decisions.shape:
        raise ValueError("labels and decisions differ in length")
    if not labels.any():
        raise ValueError("recall undefined: no positive label")
    tp = int(np.sum(labels & decisions))
    fp = int(np.sum(~labels & decisions))
    fn = int(np.sum(labels & ~decisions))
    no_pred = tp + fp == 0
    precision = 0.0 if no_pred else tp / (tp + fp)
    recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return PRF(precision, recall, f1, no_pred)


def auc(labels, scores) -> float:
    """ROC AUC as the Mann-Whitney U statistic over (#pos * #neg), ties = 1/2."""
    labels = _as_binary(labels, "labels")
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores differ in length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if labels.all() or not labels.any():
        raise ValueError("degenerate labels")
    return _kernels.mann_whitney_auc(scores, labels)


class Smd(NamedTuple):
    value: float
    mode: str
    n: int


def standardized_mean_difference(h, o, paired: bool = True) -> Smd:
    """Effect size of ``h`` relative to ``o``.

    Paired: mean(h - o) / sd(h - o). Unpaired: difference of means over the
    pooled standard deviation. Sample (n - 1) standard deviations throughout.
    """
    h = np.asarray(h, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if paired:
        if h.shape != o.shape:
            raise ValueError("paired mode needs equal lengths")
        if h.size < 2:
            raise ValueError("need at least 2 pairs")
        d = h - o
        sd = d.std(ddof=1)
        if not sd > 0:
            raise ValueError("degenerate variance")
        return Smd(float(d.mean() / sd), "paired", int(h.size))
    if h.size < 2 or o.size < 2:
        raise ValueError("need at least 2 elements per group")
    pooled = ((h.size - 1) * h.var(ddof=1) + (o.size - 1) * o.var(ddof=1)) / (h.size + o.size - 2)
    if not pooled > 0:
        raise ValueError("degenerate variance")
    return Smd(float((h.mean() - o.mean()) / math.sqrt(pooled)), "unpaired", int(h.size + o.size))


def precision_at_k(labels, scores, k: int) -> float:
    """Fraction of positives among the ``k`` highest scores.

    Equal scores keep their input order (stable sort on descending score).
    """
    if k <= 0:
        raise ValueError("k must be positive")
    labels = _as_binary(labels, "labels")
    scores = np.asarray(scores, dtype=np.float64)
    if k > labels.size:
        raise ValueError("k exceeds number of predictions")
    order = np.argsort(-scores, kind="stable")
    return float(labels[order[:k]].mean())
