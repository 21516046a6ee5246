import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hallulrp import _kernels
from hallulrp.metrics import (
    auc,
    binary_prf,
    is_degenerated,
    precision_at_k,
    repetition_count,
    sentence_bleu,
    standardized_mean_difference,
)
from oracles import all_sequences, auc_oracle, bleu_oracle, prf_oracle

tokens = st.lists(st.sampled_from("abcde"), min_size=1, max_size=12)


class TestBleu:
    def test_identical(self):
        assert sentence_bleu(list("abcde"), list("abcde")) == 1.0

    def test_disjoint_is_zero(self):
        # unigram precision is unsmoothed, so no overlap gives exactly 0
        assert sentence_bleu(["a", "b"], ["c", "d"]) == 0.0

    def test_short_hypothesis_hand_value(self):
        # p1 = 3/3, p2 = (2+1)/(2+1), p3 = (1+1)/(1+1), p4 = (0+1)/(0+1); BP = exp(1 - 4/3)
        expected = math.exp(1 - 4 / 3)
        assert sentence_bleu(list("abc"), list("abcd")) == pytest.approx(expected, abs=1e-12)

    def test_partial_overlap_hand_value(self):
        # hyp a b x d, ref a b c d: p1 = 3/4, p2 = (1+1)/(3+1), p3 = 1/3, p4 = 1/2, BP = 1
        expected = (0.75 * 0.5 * (1 / 3) * 0.5) ** 0.25
        assert sentence_bleu(list("abxd"), list("abcd")) == pytest.approx(expected, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty input"):
            sentence_bleu([], ["a"])
        with pytest.raises(ValueError, match="empty input"):
            sentence_bleu(["a"], [])

    def test_matches_oracle_exhaustively(self):
        seqs = list(all_sequences("ab", 4)) + list(all_sequences("abc", 3))
        for hyp in seqs:
            for ref in seqs:
                assert sentence_bleu(hyp, ref) == pytest.approx(bleu_oracle(hyp, ref), abs=1e-12)

    @given(tokens)
    def test_self_bleu_is_one(self, s):
        assert sentence_bleu(s, s) == pytest.approx(1.0)

    @given(tokens, tokens, st.permutations("abcde"))
    def test_relabel_invariance(self, h, r, perm):
        m = dict(zip("abcde", perm))
        assert sentence_bleu(h, r) == pytest.approx(sentence_bleu([m[t] for t in h], [m[t] for t in r]))

    @given(tokens, tokens)
    def test_unit_interval(self, h, r):
        assert 0.0 <= sentence_bleu(h, r) <= 1.0 + 1e-12

    def test_works_on_ids(self):
        assert sentence_bleu([4, 5, 6], [4, 5, 6]) == 1.0


class TestRepetition:
    def test_hand_enumerated_bigrams(self):
        assert repetition_count(list("ababab"), 2, 2) == 3

    def test_distinct(self):
        assert repetition_count(list("abcd")) == 0

    def test_empty(self):
        assert repetition_count([]) == 0

    @given(tokens, st.permutations("abcde"))
    def test_relabel_invariance(self, s, perm):
        m = dict(zip("abcde", perm))
        assert repetition_count(s) == repetition_count([m[t] for t in s])

    @given(tokens)
    def test_self_append_monotone(self, s):
        assert repetition_count(s + s) >= repetition_count(s)

    def test_degenerated_threshold_three(self):
        # ababa: bigrams ab x2, ba x2 -> 2; trigrams aba x2 -> 1; no repeated 4-gram
        src = list("abcdef")
        out = list("ababa")
        assert repetition_count(src) == 0
        assert repetition_count(out) == 3
        assert is_degenerated(src, out, k=3)

    def test_degenerated_equal_counts(self):
        s = list("ababab")
        assert not is_degenerated(s, s, k=3)

    def test_degenerated_difference_two(self):
        src = list("aab") + list("aab")  # bigrams aa, ab, ba, aa, ab -> 2 repeats at n=2
        assert repetition_count(src, 2, 2) == 2
        out = list("ccdccdcc")
        assert repetition_count(out, 2, 2) == 4
        assert not is_degenerated(src, out, k=3, n_min=2, n_max=2)


class TestPrf:
    def test_all_correct(self):
        prf = binary_prf([1, 0, 1], [1, 0, 1])
        assert prf[:3] == (1.0, 1.0, 1.0)

    def test_all_negative_predictions(self):
        prf = binary_prf([1, 0, 1], [0, 0, 0])
        assert prf.recall == 0.0 and prf.f1 == 0.0 and prf.precision == 0.0
        assert prf.no_predicted_positive

    def test_counts(self):
        # TP=3, FP=1, FN=1
        labels = [1, 1, 1, 0, 1, 0]
        dec = [1, 1, 1, 1, 0, 0]
        prf = binary_prf(labels, dec)
        assert prf[:3] == pytest.approx((0.75, 0.75, 0.75))

    def test_errors(self):
        with pytest.raises(ValueError):
            binary_prf([], [])
        with pytest.raises(ValueError):
            binary_prf([0, 0], [1, 0])

    def test_matches_oracle_exhaustively(self):
        for n in range(1, 7):
            for labels in itertools.product((0, 1), repeat=n):
                if not any(labels):
                    continue
                for dec in itertools.product((0, 1), repeat=n):
                    got = binary_prf(labels, dec)
                    assert got[:3] == pytest.approx(prf_oracle(labels, dec), abs=1e-12)


class TestAuc:
    def test_separated(self):
        assert auc([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) == 1.0

    def test_all_ties(self):
        assert auc([1, 0, 1, 0], [0.3] * 4) == 0.5

    def test_hand_pairs(self):
        # pairs (0.9,0.5) (0.9,0.1) (0.4,0.1) won, (0.4,0.5) lost -> 3/4
        assert auc([1, 1, 0, 0], [0.9, 0.4, 0.5, 0.1]) == 0.75

    def test_single_class(self):
        with pytest.raises(ValueError, match="degenerate labels"):
            auc([1, 1], [0.1, 0.2])

    def test_matches_oracle_exhaustively(self):
        for n in range(2, 7):
            for labels in itertools.product((0, 1), repeat=n):
                if all(labels) or not any(labels):
                    continue
                for scores in itertools.product((0.0, 1.0, 2.0), repeat=n):
                    assert auc(labels, scores) == pytest.approx(auc_oracle(labels, scores), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, n)
            labels[0], labels[1] = 0, 1
            scores = np.round(rng.normal(size=n), 1)
            transformed = np.exp(3 * scores) + 5
            assert auc(labels, transformed) == pytest.approx(auc(labels, scores), abs=1e-12)

    def test_reversal(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            labels = rng.integers(0, 2, 30)
            labels[:2] = (0, 1)
            scores = rng.permutation(30).astype(float)
            assert auc(labels, -scores) == pytest.approx(1 - auc(labels, scores), abs=1e-12)

    def test_kernel_paths_agree(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            labels = rng.integers(0, 2, 50).astype(bool)
            labels[:2] = (False, True)
            scores = np.round(rng.normal(size=50), 1)
            a = _kernels.mann_whitney_auc_numpy(scores, labels)
            b = _kernels.mann_whitney_auc_numba(scores, labels)
            assert a == pytest.approx(b, abs=1e-12)


class TestSmd:
    def test_identical_pairs_degenerate(self):
        with pytest.raises(ValueError, match="degenerate variance"):
            standardized_mean_difference([1, 2, 3], [1, 2, 3])

    def test_hand_value(self):
        o = np.array([0.5, 2.0, -1.0, 4.0])
        h = o + np.array([1, 1, 3, 3])
        res = standardized_mean_difference(h, o)
        assert res.value == pytest.approx(2 / np.std([1, 1, 3, 3], ddof=1))
        assert res.value == pytest.approx(1.7320508, abs=1e-6)
        assert res.mode == "paired"

    def test_antisymmetry(self):
        rng = np.random.default_rng(3)
        h, o = rng.normal(size=10), rng.normal(size=10)
        for paired in (True, False):
            a = standardized_mean_difference(h, o, paired).value
            b = standardized_mean_difference(o, h, paired).value
            assert a == pytest.approx(-b)

    def test_unpaired_hand_value(self):
        # means 2 and 0, both sample variances 1 -> pooled sd 1
        res = standardized_mean_difference([1, 2, 3], [-1, 0, 1], paired=False)
        assert res.value == pytest.approx(2.0)
        assert res.mode == "unpaired"


class TestPrecisionAtK:
    def test_all_true(self):
        assert precision_at_k([1, 1, 0], [3, 2, 1], 2) == 1.0

    def test_three_of_twenty(self):
        scores = np.arange(40, 0, -1, dtype=float)
        labels = np.zeros(40, dtype=int)
        labels[[0, 7, 19, 25]] = 1
        assert precision_at_k(labels, scores, 20) == 0.15

    def test_ties_keep_input_order(self):
        assert precision_at_k([0, 1], [1.0, 1.0], 1) == 0.0
        assert precision_at_k([1, 0], [1.0, 1.0], 1) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            precision_at_k([1], [1.0], 0)
        with pytest.raises(ValueError):
            precision_at_k([1], [1.0], 2)

    def test_random_labels_near_base_rate(self):
        vals = []
        for seed in range(200):
            rng = np.random.default_rng(seed)
            labels = rng.permutation(np.repeat([0, 1], 50))
            vals.append(precision_at_k(labels, rng.normal(size=100), 20))
        assert np.mean(vals) == pytest.approx(0.5, abs=0.03)
