from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")


@dataclass
class Vocabulary:
    """Dense id <-> token table with per-side corpus frequencies.

    Ids 0..3 are reserved for padding, BOS, EOS and UNK. ``src_freq`` and
    ``tgt_freq`` count occurrences on each side of the training corpus.
    """

    tokens: list
    src_freq: list
    tgt_freq: list
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved tokens")
        if not (len(self.tokens) == len(self.src_freq) == len(self.tgt_freq)):
            raise ValueError("frequency tables do not match vocabulary size")
        if min(self.src_freq + self.tgt_freq, default=0) < 0:
            raise ValueError("frequencies must be non-negative")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, pairs, min_count=1, max_size=None):
        """Build from (source text, target text) pairs, most frequent first.

        ``max_size`` caps the total size including the reserved ids.
        """
        src_counts, tgt_counts = Counter(), Counter()
        for src, tgt in pairs:
            src_counts.update(src.split())
            tgt_counts.update(tgt.split())
        total = src_counts + tgt_counts
        kept = [t for t, c in total.items() if c >= min_count and t not in SPECIALS]
        kept.sort(key=lambda t: (-total[t], t))
        if max_size is not None:
            if max_size <= len(SPECIALS):
                raise ValueError("max_size must leave room for regular tokens")
            kept = kept[:max_size - len(SPECIALS)]
        tokens = list(SPECIALS) + kept
        return cls(
            tokens=tokens,
            src_freq=[src_counts.get(t, 0) for t in tokens],
            tgt_freq=[tgt_counts.get(t, 0) for t in tokens],
        )

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self.index.get(token, UNK)

    def token(self, i):
        return self.tokens[i]

    def to_dict(self):
        return {"tokens": list(self.tokens), "src_freq": list(self.src_freq), "tgt_freq": list(self.tgt_freq)}

    @classmethod
    def from_dict(cls, d):
        return cls(tokens=list(d["tokens"]), src_freq=list(d["src_freq"]), tgt_freq=list(d["tgt_freq"]))

    def source_tokens(self):
        """Ids that occur on the source side, excluding reserved ids."""
        return [i for i in range(4, len(self.tokens)) if self.src_freq[i] > 0]


def tokenize(text, vocab):
    return [vocab.id(t) for t in text.split()]


def detokenize(ids, vocab):
    return " ".join(vocab.token(i) for i in ids if i not in (PAD, BOS, EOS))
