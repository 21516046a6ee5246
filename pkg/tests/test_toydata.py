import pytest

from hallulrp import toydata as td


@pytest.fixture(scope="module")
def lang():
    return td.ToyLanguage()


def test_lexicons_are_disjoint_between_languages(lang):
    src_words = set(lang.nouns) | set(lang.adjs) | set(lang.verbs) | set(lang.dets)
    tgt_words = set(lang.t_nouns.values()) | set(lang.t_adjs.values()) | set(lang.t_verbs.values())
    tgt_words |= {lang.obj_marker, lang.conj}
    assert not src_words & tgt_words
    assert len(set(lang.t_nouns.values())) == len(lang.nouns)


def test_clean_pairs_follow_the_grammar(lang):
    import numpy as np

    rng = np.random.default_rng(0)
    for _ in range(200):
        src, tgt = lang.sample_pair(rng)
        s, t = src.split(), tgt.split()
        assert s[-1] == t[-1] and s[-1] in td.END_PUNCT
        assert s.count(",") == t.count(lang.conj)
        assert not set(lang.dets) & set(t)
        # every content word has its translation in order
        content = [w for w in s if w in lang.t_nouns or w in lang.t_verbs]
        mapped = [lang.t_nouns.get(w) or lang.t_verbs[w] for w in content]
        it = iter(t)
        assert all(m in it for m in mapped)


def test_corpus_is_deterministic_and_seed_sensitive(lang):
    assert lang.corpus(50, seed=3) == lang.corpus(50, seed=3)
    assert lang.corpus(50, seed=3) != lang.corpus(50, seed=4)
    assert td.ToyLanguage().nouns == lang.nouns


def test_noise_rates(lang):
    pairs = lang.corpus(4000, seed=1)
    junk = {" ".join(j) for j in lang.junk}
    noisy = sum(t in junk for _, t in pairs) / len(pairs)
    assert abs(noisy - lang.cfg.noise_rate) < 0.015
    clean = lang.corpus(500, seed=1, noise=False)
    assert not any(t in junk for _, t in clean)


def test_corpus_file_round_trip(tmp_path, lang):
    pairs = lang.corpus(30, seed=2)
    td.write_corpus(pairs, tmp_path / "c.tsv")
    assert td.read_corpus(tmp_path / "c.tsv") == pairs
    with pytest.raises(ValueError, match="tab"):
        td.write_corpus([("a\tb", "c")], tmp_path / "bad.tsv")
    (tmp_path / "bad.tsv").write_text("only one column\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        td.read_corpus(tmp_path / "bad.tsv")
