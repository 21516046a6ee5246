"""Slow reference implementations used only by the test-suite."""
import itertools
import math


def count_occurrences(seq, gram):
    n = len(gram)
    return sum(1 for i in range(len(seq) - n + 1) if tuple(seq[i:i + n]) == tuple(gram))


def bleu_oracle(hyp, ref, max_n=4):
    """BLEU written from the definition: clipped counts found by scanning."""
    hyp, ref = list(hyp), list(ref)
    precisions = []
    for n in range(1, max_n + 1):
        positions = range(len(hyp) - n + 1)
        seen = []
        clipped = 0
        for i in positions:
            g = tuple(hyp[i:i + n])
            if g in seen:
                continue
            seen.append(g)
            clipped += min(count_occurrences(hyp, g), count_occurrences(ref, g))
        total = len(list(positions))
        if n == 1:
            precisions.append(clipped / total)
        else:
            precisions.append((clipped + 1) / (total + 1))
    if precisions[0] == 0:
        return 0.0
    geo = 1.0
    for p in precisions:
        geo *= p
    geo = geo ** (1.0 / max_n)
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1 - len(ref) / len(hyp))
    return bp * geo


def auc_oracle(labels, scores):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def prf_oracle(labels, decisions):
    tp = fp = fn = 0
    for y, d in zip(labels, decisions):
        if y and d:
            tp += 1
        elif d:
            fp += 1
        elif y:
            fn += 1
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn)
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def best_threshold_oracle(scores, labels):
    """Exhaustive midpoint sweep: returns (threshold, f1) with ties -> lower."""
    values = sorted(set(scores))
    candidates = [(a + b) / 2 for a, b in zip(values, values[1:])]
    if not candidates:
        candidates = [values[0] - 1.0]
    best = None
    for thr in sorted(candidates):
        dec = [s > thr for s in scores]
        f = prf_oracle(labels, dec)[2]
        if best is None or f > best[1]:
            best = (thr, f)
    return best


def all_sequences(alphabet, max_len):
    for n in range(1, max_len + 1):
        yield from itertools.product(alphabet, repeat=n)
