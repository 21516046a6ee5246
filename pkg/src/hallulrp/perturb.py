"""Source perturbations, BLEU-threshold labelling and contrastive datasets.

Every seed sentence gets its own generator derived from ``(cfg.seed,
seed_id)``, so results do not depend on processing order.
"""
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from hallulrp.metrics import is_degenerated, sentence_bleu
from hallulrp.model.decoding import beam_decode
from hallulrp.model.vocab import detokenize, tokenize

KINDS = ("misspell", "titlecase", "insert")
INSERT_CLASSES = ("most-frequent", "least-frequent", "mid-frequency", "punctuation")
HALLUCINATED, KEPT, DISCARDED = "hallucinated", "kept-negative", "discarded"
DEFAULT_PUNCT_CHARS = ".,!?;:'\"-()"


class InsufficientPositivesError(RuntimeError):
    def __init__(self, message, counts):
        super().__init__(f"{message}: {counts}")
        self.counts = counts


@dataclass(frozen=True)
class Thresholds:
    orig_min: float = 0.3  # bleu(y', y) must exceed this
    pert_max: float = 0.03  # bleu(y~, y') must be below this
    copy_max: float = 0.5  # bleu(y~, x~) must be below this


@dataclass(frozen=True)
class GenConfig:
    p_misspell: float = 0.1
    p_titlecase: float = 0.1
    misspell_per_word: bool = False
    insert_classes: tuple = INSERT_CLASSES
    class_size: int = 30
    punct_chars: str = DEFAULT_PUNCT_CHARS
    min_src_len: int = 8
    max_src_len: int = 22
    out_clip: int = None
    thresholds: Thresholds = Thresholds()
    degeneration_k: int = 3
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    max_seeds: int = 3000
    beam: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("p_misspell", "p_titlecase"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        t = self.thresholds
        if isinstance(t, dict):
            object.__setattr__(self, "thresholds", Thresholds(**t))
            t = self.thresholds
        for name in ("orig_min", "pert_max", "copy_max"):
            if not 0.0 <= getattr(t, name) <= 1.0:
                raise ValueError(f"threshold {name} must be in [0, 1]")
        if self.n_train < 1 or self.n_val < 1 or self.n_test < 0:
            raise ValueError("split sizes must be >= 1")
        if self.min_src_len > self.max_src_len:
            raise ValueError("min_src_len must be <= max_src_len")
        object.__setattr__(self, "insert_classes", tuple(self.insert_classes))
        bad = set(self.insert_classes) - set(INSERT_CLASSES)
        if bad:
            raise ValueError(f"unknown insertion classes {sorted(bad)}")

    @classmethod
    def analysis(cls, src_len=12, out_clip=10, **kw):
        """Fixed source length and clipped outputs for contrastive analysis."""
        return cls(min_src_len=src_len, max_src_len=src_len, out_clip=out_clip, **kw)

    def to_dict(self):
        d = asdict(self)
        d["insert_classes"] = list(self.insert_classes)
        return d


# --- perturbations -----------------------------------------------------------

def misspell(src, p, rng, per_word=False):
    """Delete characters with probability ``p``; emptied words are removed.

    With ``per_word`` each word is picked with probability ``p`` and loses one
    random character instead.
    """
    words = []
    for w in src.split():
        if per_word:
            if rng.random() < p:
                i = int(rng.integers(len(w)))
                w = w[:i] + w[i + 1:]
        else:
            keep = rng.random(len(w)) >= p
            w = "".join(ch for ch, k in zip(w, keep) if k)
        if w:
            words.append(w)
    return " ".join(words)


def titlecase(src, p, rng):
    """Upper-case the first character of each word with probability ``p``."""
    return " ".join(w[:1].upper() + w[1:] if rng.random() < p else w for w in src.split())


def insertion_classes(vocab, size, rng, punct_chars=DEFAULT_PUNCT_CHARS):
    """Token-id classes over source-side vocabulary entries.

    Frequent/rare are the ``size`` highest/lowest source frequencies (ties by
    id); mid-frequency is a uniform sample of ``size`` from the rest.
    """
    pool = vocab.source_tokens()
    by_freq = sorted(pool, key=lambda i: (-vocab.src_freq[i], i))
    most = by_freq[:size]
    least = sorted(pool, key=lambda i: (vocab.src_freq[i], i))[:size]
    rest = [i for i in by_freq if i not in set(most) | set(least)]
    mid = sorted(rng.choice(rest, size=min(size, len(rest)), replace=False).tolist()) if rest else []
    punct = [i for i in pool if all(ch in punct_chars for ch in vocab.token(i))]
    return {"most-frequent": most, "least-frequent": least, "mid-frequency": mid, "punctuation": sorted(punct)}


def insert_token(src_ids, cls_ids, rng, name="class"):
    if not cls_ids:
        raise ValueError(f"insertion class {name} is empty (size 0)")
    return [int(cls_ids[int(rng.integers(len(cls_ids)))])] + list(src_ids)


# --- labelling ---------------------------------------------------------------

def _bleu(hyp, ref):
    h, r = hyp.split(), ref.split()
    if not h or not r:
        return None
    return sentence_bleu(h, r)


def label_pair(pert_src, pert_out, ref, orig_out, th=Thresholds()):
    """Returns (label, reason, bleu(y', y), bleu(y~, y'), bleu(y~, x~))."""
    b_ref = _bleu(orig_out, ref)
    b_pert = _bleu(pert_out, orig_out)
    b_copy = _bleu(pert_out, pert_src)
    if b_ref is None or b_pert is None or b_copy is None:
        return DISCARDED, "empty sequence", b_ref, b_pert, b_copy
    if not b_ref > th.orig_min:
        return DISCARDED, "original translation below threshold", b_ref, b_pert, b_copy
    if b_pert < th.pert_max and b_copy < th.copy_max:
        return HALLUCINATED, None, b_ref, b_pert, b_copy
    return KEPT, None, b_ref, b_pert, b_copy


@dataclass
class ContrastivePair:
    id: str
    seed_id: int
    kind: str
    insert_class: str
    src: str
    ref: str
    orig_out: str
    pert_src: str
    pert_out: str
    fired: bool
    bleu_ref_orig: float
    bleu_orig_pert: float
    bleu_src_pert: float
    label: str
    discard_reason: str
    degenerated: bool
    orig_score: float
    pert_score: float
    orig_eos: bool
    pert_eos: bool

    def to_json(self):
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)})

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


FIELD_ORDER = [f.name for f in fields(ContrastivePair)]


def split_degeneration(pairs, k=3):
    """Partition hallucinated pairs into (degenerated, non-degenerated)."""
    deg, non = [], []
    for p in pairs:
        if p.label != HALLUCINATED:
            continue
        (deg if is_degenerated(p.pert_src.split(), p.pert_out.split(), k) else non).append(p)
    return deg, non


class Translator:
    """Beam decoding over surface text with a per-instance cache."""

    def __init__(self, w, beam=4, max_len=None):
        self.w, self.beam, self.max_len = w, beam, max_len
        self._cache = {}

    def __call__(self, text):
        if text not in self._cache:
            ids = tokenize(text, self.w.vocab)
            if not ids:
                self._cache[text] = ("", None, False)
            else:
                r = beam_decode(ids, self.w, beam=self.beam, max_len=self.max_len)
                self._cache[text] = (detokenize(r.tokens, self.w.vocab), r.score, r.finished)
        return self._cache[text]


def _perturbations(src, vocab, classes, cfg, rng):
    out = []
    for kind in KINDS:
        if kind == "misspell":
            out.append((kind, None, misspell(src, cfg.p_misspell, rng, cfg.misspell_per_word)))
        elif kind == "titlecase":
            out.append((kind, None, titlecase(src, cfg.p_titlecase, rng)))
        else:
            for name in cfg.insert_classes:
                ids = insert_token([], classes[name], rng, name)
                out.append((kind, name, " ".join([vocab.token(ids[0])] + src.split())))
    return out


def label_seed(seed_id, src, ref, translate, vocab, classes, cfg):
    """All contrastive pairs for one seed sentence."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, seed_id]))
    orig_out, orig_score, orig_eos = translate(src)
    pairs = []
    for kind, cls_name, pert_src in _perturbations(src, vocab, classes, cfg, rng):
        fired = pert_src != src
        if not fired:
            pert_out, pert_score, pert_eos = orig_out, orig_score, orig_eos
        else:
            pert_out, pert_score, pert_eos = translate(pert_src)
        label, reason, b1, b2, b3 = label_pair(pert_src, pert_out, ref, orig_out, cfg.thresholds)
        if not fired and label != DISCARDED:
            label, reason = DISCARDED, "perturbation did not fire"
        deg = label == HALLUCINATED and is_degenerated(pert_src.split(), pert_out.split(), cfg.degeneration_k)
        suffix = kind if cls_name is None else f"{kind}:{cls_name}"
        pairs.append(ContrastivePair(
            id=f"{seed_id}-{suffix}", seed_id=seed_id, kind=kind, insert_class=cls_name,
            src=src, ref=ref, orig_out=orig_out, pert_src=pert_src, pert_out=pert_out, fired=fired,
            bleu_ref_orig=b1, bleu_orig_pert=b2, bleu_src_pert=b3, label=label, discard_reason=reason,
            degenerated=deg, orig_score=orig_score, pert_score=pert_score,
            orig_eos=orig_eos, pert_eos=pert_eos,
        ))
    return pairs


def select_seeds(corpus, cfg):
    """Indices of corpus pairs within the source-length bounds, in a seeded order."""
    idx = [i for i, (s, _) in enumerate(corpus) if cfg.min_src_len <= len(s.split()) <= cfg.max_src_len]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    return [idx[i] for i in rng.permutation(len(idx))]


def label_corpus(w, corpus, cfg, quota=None):
    """Label seeds in seeded order until ``quota`` positives and negatives exist.

    Returns (pairs, report). ``quota`` defaults to half the requested total.
    """
    vocab = w.vocab
    classes = insertion_classes(vocab, cfg.class_size,
                                np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC1A5])),
                                cfg.punct_chars)
    for name in cfg.insert_classes:
        if not classes[name]:
            raise ValueError(f"insertion class {name} is empty (size 0)")
    if quota is None:
        quota = (cfg.n_train + cfg.n_val + cfg.n_test + 1) // 2
    translate = Translator(w, cfg.beam, cfg.out_clip)
    pairs, n_pos, n_neg, used = [], 0, 0, 0
    for seed_id in select_seeds(corpus, cfg)[:cfg.max_seeds]:
        if n_pos >= quota and n_neg >= quota:
            break
        src, ref = corpus[seed_id]
        new = label_seed(seed_id, src, ref, translate, vocab, classes, cfg)
        used += 1
        n_pos += sum(p.label == HALLUCINATED for p in new)
        n_neg += sum(p.label == KEPT for p in new)
        pairs.extend(new)
    report = {"seeds_used": used, "classes": {k: len(v) for k, v in classes.items()},
              "labelled": count_labels(pairs)}
    return pairs, report


def count_labels(pairs):
    by_kind = Counter()
    for p in pairs:
        key = p.kind if p.insert_class is None else f"{p.kind}:{p.insert_class}"
        by_kind[(key, p.label)] += 1
    kinds = sorted({k for k, _ in by_kind})
    out = {k: {lab: by_kind[(k, lab)] for lab in (HALLUCINATED, KEPT, DISCARDED)} for k in kinds}
    out["total"] = {lab: sum(v[lab] for v in out.values()) for lab in (HALLUCINATED, KEPT, DISCARDED)}
    deg = sum(p.degenerated for p in pairs)
    out["total"]["degenerated"] = deg
    out["total"]["non-degenerated"] = out["total"][HALLUCINATED] - deg
    reasons = Counter(p.discard_reason for p in pairs if p.label == DISCARDED)
    out["discard_reasons"] = dict(sorted(reasons.items()))
    return out


def _balance(pairs, target, rng):
    pos = [p for p in pairs if p.label == HALLUCINATED]
    neg = [p for p in pairs if p.label == KEPT]
    m = min(len(pos), len(neg), target // 2 + target % 2)
    pick = lambda xs: [xs[i] for i in sorted(rng.choice(len(xs), size=m, replace=False))]
    return sorted(pick(pos) + pick(neg), key=lambda p: (p.seed_id, p.id))


def split_dataset(pairs, cfg):
    """Seed-disjoint, label-balanced train/val/test splits.

    Seeds are shuffled and assigned to val, then test, until each holds
    enough of both labels; the remaining seeds form train. Every split is
    down-sampled to equal positive and negative counts.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5911]))
    groups = {}
    for p in pairs:
        if p.label != DISCARDED:
            groups.setdefault(p.seed_id, []).append(p)
    seeds = sorted(groups)
    seeds = [seeds[i] for i in rng.permutation(len(seeds))]
    splits = {"val": [], "test": [], "train": []}
    want = {"val": cfg.n_val, "test": cfg.n_test}
    counts = {k: Counter() for k in splits}
    for s in seeds:
        for name in ("val", "test"):
            half = (want[name] + 1) // 2
            if counts[name][HALLUCINATED] < half or counts[name][KEPT] < half:
                break
        else:
            name = "train"
        splits[name].extend(groups[s])
        counts[name].update(p.label for p in groups[s])
    out = {}
    for name, target in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        if target == 0:
            out[name] = []
            continue
        out[name] = _balance(splits[name], target, rng)
        if not out[name]:
            raise InsufficientPositivesError(
                f"cannot balance the {name} split",
                {k: dict(v) for k, v in counts.items()})
    return out


def generate_dataset(w, corpus, cfg):
    """Label seeds, split and balance. Returns (splits, report, all labelled pairs)."""
    if not corpus:
        raise ValueError("seed corpus is empty")
    pairs, report = label_corpus(w, corpus, cfg)
    splits = split_dataset(pairs, cfg)
    report["splits"] = {name: count_split(ps) for name, ps in splits.items()}
    report["config"] = cfg.to_dict()
    return splits, report, pairs


def count_split(pairs):
    return {
        "n": len(pairs),
        HALLUCINATED: sum(p.label == HALLUCINATED for p in pairs),
        KEPT: sum(p.label == KEPT for p in pairs),
        "degenerated": sum(p.degenerated for p in pairs),
        "seeds": len({p.seed_id for p in pairs}),
    }


def write_pairs(pairs, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            f.write(p.to_json() + "\n")


def read_pairs(path):
    with open(path, encoding="utf-8") as f:
        return [ContrastivePair.from_json(line) for line in f if line.strip()]
