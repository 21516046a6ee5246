"""Synthetic toy translation task and the tab-separated corpus format.

Source sentences are clauses of (det) (adj) noun verb (det) (adj) noun joined
by commas. The target language drops determiners, puts adjectives after
nouns, marks objects with a particle and joins clauses with a conjunction.
Lexicons are pseudo-words with disjoint shapes per language (CVCV source,
CVC target) so no target word can equal a source word.

A fraction ``noise_rate`` of pairs imitates crawled-corpus noise: a source
with casing/spelling damage aligned to an unrelated boilerplate target
(fluent junk or a repetitive loop). A further ``augment_rate`` of pairs has
one damaged source word but a correct target, so lightly damaged inputs are
usually still translated while heavily damaged ones drift into junk.
"""
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SRC_CONS = "bdfgklmnprstvz"
VOWELS = "aeiou"
TGT_CONS = "bdfghjklmnprstvwxz"
JUNK_CODAS = ("mp", "nk", "st", "rt", "lk", "nd", "sh", "ft")
END_PUNCT = (".", "!", "?")
PUNCT = (",", ".", "!", "?", ";", ":")


@dataclass(frozen=True)
class ToyTaskConfig:
    n_nouns: int = 30
    n_adjs: int = 10
    n_verbs: int = 12
    n_dets: int = 3
    max_clauses: int = 3
    noise_rate: float = 0.05
    noise_damage: float = 0.6
    augment_rate: float = 0.1
    n_junk_sentences: int = 8
    lexicon_seed: int = 1234

    def to_dict(self):
        return asdict(self)


def _words(rng, n, make, taken):
    out = []
    while len(out) < n:
        w = make(rng)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _cvcv(rng):
    return "".join(rng.choice(list(SRC_CONS)) + rng.choice(list(VOWELS)) for _ in range(2))


def _cvc(rng):
    return rng.choice(list(TGT_CONS)) + rng.choice(list(VOWELS)) + rng.choice(list(TGT_CONS))


def _junk(rng):
    return rng.choice(list(TGT_CONS)) + rng.choice(list(VOWELS)) + rng.choice(list(JUNK_CODAS))


class ToyLanguage:
    def __init__(self, cfg=ToyTaskConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.lexicon_seed)
        taken = set()
        self.nouns = _words(rng, cfg.n_nouns, _cvcv, taken)
        self.adjs = _words(rng, cfg.n_adjs, _cvcv, taken)
        self.verbs = _words(rng, cfg.n_verbs, _cvcv, taken)
        self.dets = _words(rng, cfg.n_dets, _cvcv, taken)
        taken_t = set()
        (self.obj_marker, self.conj) = _words(rng, 2, _cvc, taken_t)
        self.t_nouns = dict(zip(self.nouns, _words(rng, cfg.n_nouns, _cvc, taken_t)))
        self.t_adjs = dict(zip(self.adjs, _words(rng, cfg.n_adjs, _cvc, taken_t)))
        self.t_verbs = dict(zip(self.verbs, _words(rng, cfg.n_verbs, _cvc, taken_t)))
        junk_words = _words(rng, 24, _junk, set())
        self.junk = []
        for i in range(cfg.n_junk_sentences):
            if i % 2 == 1:
                unit = list(rng.choice(junk_words, size=int(rng.integers(1, 3)), replace=False))
                self.junk.append(unit * int(rng.integers(4, 7)))
            else:
                self.junk.append(list(rng.choice(junk_words, size=int(rng.integers(4, 9)))))
        # Zipf-like unigram distributions so insertion classes differ in frequency
        self._pn = self._zipf(cfg.n_nouns)
        self._pa = self._zipf(cfg.n_adjs)
        self._pv = self._zipf(cfg.n_verbs)

    @staticmethod
    def _zipf(n):
        p = 1.0 / np.arange(1, n + 1)
        return p / p.sum()

    def _np(self, rng):
        src, tgt = [], []
        if rng.random() < 0.5:
            src.append(self.dets[int(rng.integers(len(self.dets)))])
        adj = self.adjs[rng.choice(len(self.adjs), p=self._pa)] if rng.random() < 0.3 else None
        noun = self.nouns[rng.choice(len(self.nouns), p=self._pn)]
        if adj:
            src.append(adj)
        src.append(noun)
        tgt.append(self.t_nouns[noun])
        if adj:
            tgt.append(self.t_adjs[adj])
        return src, tgt

    def sample_pair(self, rng):
        src, tgt = [], []
        for c in range(int(rng.integers(1, self.cfg.max_clauses + 1))):
            if c:
                src.append(",")
                tgt.append(self.conj)
            s_np, t_np = self._np(rng)
            verb = self.verbs[rng.choice(len(self.verbs), p=self._pv)]
            src += s_np + [verb]
            tgt += t_np + [self.t_verbs[verb]]
            if rng.random() < 0.6:
                o_np, to_np = self._np(rng)
                src += o_np
                tgt += [self.obj_marker] + to_np
        end = END_PUNCT[rng.choice(3, p=[0.8, 0.1, 0.1])]
        return " ".join(src + [end]), " ".join(tgt + [end])

    @staticmethod
    def _damage(w, rng):
        if rng.random() < 0.5:
            return w[0].upper() + w[1:]
        keep = rng.random(len(w)) >= 0.3
        if keep.all():
            keep[int(rng.integers(len(w)))] = False
        return "".join(ch for ch, k in zip(w, keep) if k)

    def sample_noise_pair(self, rng):
        src, _ = self.sample_pair(rng)
        words = []
        for w in src.split():
            if w not in PUNCT and rng.random() < self.cfg.noise_damage:
                w = self._damage(w, rng)
            if w:
                words.append(w)
        junk = self.junk[int(rng.integers(len(self.junk)))]
        return " ".join(words), " ".join(junk)

    def sample_augmented_pair(self, rng):
        """Clean pair with one damaged source word and an intact target."""
        src, tgt = self.sample_pair(rng)
        words = src.split()
        slots = [i for i, w in enumerate(words) if w not in PUNCT]
        i = slots[int(rng.integers(len(slots)))]
        words[i] = self._damage(words[i], rng)
        return " ".join(w for w in words if w), tgt

    def corpus(self, n, seed, noise=True):
        rng = np.random.default_rng(seed)
        pairs = []
        for _ in range(n):
            u = rng.random()
            if noise and u < self.cfg.noise_rate:
                pairs.append(self.sample_noise_pair(rng))
            elif noise and u < self.cfg.noise_rate + self.cfg.augment_rate:
                pairs.append(self.sample_augmented_pair(rng))
            else:
                pairs.append(self.sample_pair(rng))
        return pairs


def write_corpus(pairs, path):
    lines = []
    for src, tgt in pairs:
        if "\t" in src or "\t" in tgt or "\n" in src or "\n" in tgt:
            raise ValueError("tabs and newlines are not allowed inside sentences")
        lines.append(f"{src}\t{tgt}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_corpus(path):
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected exactly one tab")
        pairs.append((parts[0], parts[1]))
    return pairs
