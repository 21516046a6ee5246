from dataclasses import dataclass, field

import numpy as np

from hallulrp.model.transformer import (
    decode_forward,
    encode_forward,
    check_source,
    forward_trace,
    log_softmax,
    pad_batch,
)
from hallulrp.model.vocab import BOS, EOS, PAD


@dataclass
class DecodeResult:
    """Decoder output. ``tokens`` includes the final EOS when one was emitted.

    ``total_logprob`` is the plain sum of ``step_logprobs``; the length
    normalised score divides it by ``len(tokens)`` (EOS included).
    """

    tokens: list
    step_logprobs: list
    total_logprob: float
    trace: dict = field(default=None, repr=False)

    @property
    def score(self):
        return self.total_logprob / len(self.tokens)

    @property
    def finished(self):
        return bool(self.tokens) and self.tokens[-1] == EOS

    def body(self):
        """Output tokens without the trailing EOS."""
        return self.tokens[:-1] if self.finished else list(self.tokens)


def _memory(w, src_ids):
    src_ids = check_source(src_ids, w.config)
    src = np.array([src_ids + [EOS]], dtype=np.int64)
    src_mask = np.ones_like(src, dtype=bool)
    mem, _ = encode_forward(w, src, src_mask)
    return mem, src_mask


def _next_logprobs(w, prefixes, mem, src_mask):
    tgt = np.array(prefixes, dtype=np.int64)
    B = tgt.shape[0]
    logits, _ = decode_forward(w, tgt, np.ones_like(tgt, dtype=bool),
                               np.repeat(mem, B, axis=0), np.repeat(src_mask, B, axis=0))
    return log_softmax(logits[:, -1])


def greedy_decode(src_ids, w, max_len=None, trace=False):
    """Pick the argmax token each step (lowest id on ties) until EOS or max_len."""
    max_len = w.config.max_tgt_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    mem, src_mask = _memory(w, src_ids)
    out, lps = [], []
    for _ in range(max_len):
        lp = _next_logprobs(w, [[BOS] + out], mem, src_mask)[0]
        tok = int(np.argmax(lp))
        out.append(tok)
        lps.append(float(lp[tok]))
        if tok == EOS:
            break
    res = DecodeResult(out, lps, float(np.sum(lps)))
    if trace:
        res.trace = forward_trace(w, src_ids, out)
    return res


def greedy_decode_batch(srcs, w, max_len=None):
    """Greedy decoding of several sources in one padded batch."""
    max_len = w.config.max_tgt_len if max_len is None else max_len
    srcs = [check_source(s, w.config) + [EOS] for s in srcs]
    src = pad_batch(srcs)
    src_mask = src != PAD
    mem, _ = encode_forward(w, src, src_mask)
    B = len(srcs)
    outs = [[] for _ in range(B)]
    lps = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    for t in range(max_len):
        tgt = np.array([[BOS] + o + [PAD] * (t - len(o)) for o in outs], dtype=np.int64)
        tgt_mask = tgt != PAD
        tgt_mask[:, 0] = True
        logits, _ = decode_forward(w, tgt, tgt_mask, mem, src_mask)
        lp = log_softmax(logits[np.arange(B), [len(o) for o in outs]])
        for b in range(B):
            if done[b]:
                continue
            tok = int(np.argmax(lp[b]))
            outs[b].append(tok)
            lps[b].append(float(lp[b, tok]))
            done[b] = tok == EOS
        if done.all():
            break
    return [DecodeResult(o, l, float(np.sum(l))) for o, l in zip(outs, lps)]


def beam_decode(src_ids, w, beam=4, max_len=None, normalize=True, trace=False):
    """Beam search returning the best finished hypothesis.

    A hypothesis finishes when it emits EOS or reaches ``max_len``; search
    stops once ``beam`` hypotheses have finished. Finished hypotheses are
    ranked by total log-probability divided by their length
    (``normalize=False`` ranks by the raw total); ties go to the
    lexicographically smallest token-id sequence. Live hypotheses are pruned
    to ``beam`` per step with the same tie rule.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    max_len = w.config.max_tgt_len if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    mem, src_mask = _memory(w, src_ids)
    live = [((), 0.0, ())]
    finished = []
    for t in range(max_len):
        if not live:
            break
        # live is kept in lexicographic order so its index is a tie-break rank
        live.sort(key=lambda h: h[0])
        lp = _next_logprobs(w, [[BOS] + list(h[0]) for h in live], mem, src_mask)
        B, V = lp.shape
        totals = np.array([h[1] for h in live])[:, None] + lp
        parent = np.repeat(np.arange(B), V)
        token = np.tile(np.arange(V), B)
        order = np.lexsort((token, parent, -totals.ravel()))[:beam]
        new_live = []
        for idx in order:
            b, v = int(parent[idx]), int(token[idx])
            toks, _, steps = live[b]
            hyp = (toks + (v,), float(totals[b, v]), steps + (float(lp[b, v]),))
            if v == EOS or t + 1 == max_len:
                finished.append(hyp)
            else:
                new_live.append(hyp)
        live = new_live
        if len(finished) >= beam:
            break

    def rank(h):
        score = h[1] / len(h[0]) if normalize else h[1]
        return (-score, h[0])

    toks, _, steps = min(finished, key=rank)
    res = DecodeResult(list(toks), list(steps), float(np.sum(steps)))
    if trace:
        res.trace = forward_trace(w, src_ids, res.tokens)
    return res


def sequence_logprob(src_ids, out_ids, w, normalize=False):
    """Force-decode ``out_ids`` and sum the per-token log-probabilities."""
    out_ids = list(out_ids)
    if not out_ids:
        raise ValueError("output must be non-empty")
    tr = forward_trace(w, src_ids, out_ids)
    lps = tr["logp"][np.arange(len(out_ids)), out_ids]
    total = float(np.sum(lps))
    return total / len(out_ids) if normalize else total
