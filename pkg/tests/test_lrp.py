import numpy as np
import pytest
from conftest import random_model
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from lrp_oracle import Oracle

from hallulrp import lrp
from hallulrp._kernels import ab_ratios
from hallulrp.lrp import Diagnostics, LrpConfig, relevance_attention, relevance_linear
from hallulrp.model import EOS, ModelConfig, forward_trace, init_weights
from hallulrp.model.transformer import attention_forward

CFG = LrpConfig()
finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_linear_hand_example():
    r = relevance_linear(np.array([2.0, 3.0]), np.array([[0.5], [0.5]]), np.array([1.0]))
    np.testing.assert_allclose(r, [0.4, 0.6], atol=1e-12)


def test_linear_zero_relevance_and_single_input():
    x = np.array([1.0, -2.0, 0.5])
    W = np.arange(6.0).reshape(3, 2) - 2
    np.testing.assert_array_equal(relevance_linear(x, W, np.zeros(2)), np.zeros(3))
    r = relevance_linear(np.array([0.7]), np.array([[2.0, -1.0]]), np.array([0.3, 0.9]))
    np.testing.assert_allclose(r, [1.2], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 5), elements=finite),
       arrays(np.float64, (2, 3, 5), elements=st.floats(0, 3)))
def test_linear_conserves_and_is_non_negative(x, W, r_out):
    diag = Diagnostics()
    r_in = relevance_linear(x, W, r_out, CFG, b=np.ones(5), diag=diag)
    np.testing.assert_allclose(r_in.sum(axis=(1, 2)), r_out.sum(axis=(1, 2)), rtol=1e-10, atol=1e-10)
    assert (r_in >= 0).all()
    assert diag.max_conservation_error() < 1e-9
    assert 0.0 <= diag.bias_leak["linear"] <= 1.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 4, 3), elements=finite), st.floats(0.01, 100.0))
def test_scaling_positive_contributions_leaves_ratios_unchanged(Z, c):
    V, fb = ab_ratios(Z)
    scaled = np.where(Z > 0, Z * c, Z)
    V2, fb2 = ab_ratios(scaled)
    ok = ~fb[:, None, :]
    np.testing.assert_allclose(np.where(ok, V2, 0), np.where(ok, V, 0), rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(fb, fb2)


def test_fallback_columns_are_counted():
    diag = Diagnostics()
    r = relevance_linear(np.array([1.0, 2.0]), np.array([[-1.0], [-1.0]]), np.array([1.0]), CFG, diag=diag)
    np.testing.assert_allclose(r, [1 / 3, 2 / 3])
    assert diag.fallbacks == 1
    r = relevance_linear(np.zeros(4), np.ones((4, 1)), np.array([2.0]), CFG)
    np.testing.assert_allclose(r, [0.5] * 4)


def _attention_params(d=4, seed=0):
    rng = np.random.default_rng(seed)
    P = {}
    for n in ("wq", "wk", "wv", "wo"):
        P["a." + n] = rng.normal(size=(d, d))
    for n in ("bq", "bk", "bv", "bo"):
        P["a." + n] = rng.normal(size=d) * 0.1
    return P


def _attn(P, xq, xkv, allowed, heads):
    _, c = attention_forward(P, "a.", xq[None], xkv[None], allowed[None], heads)
    return c


def test_one_hot_attention_routes_value_relevance_to_that_key():
    P = _attention_params()
    rng = np.random.default_rng(1)
    xq, xkv = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    allowed = np.zeros((2, 3), dtype=bool)
    allowed[:, 1] = True
    c = _attn(P, xq, xkv, allowed, 2)
    r_out = rng.random((1, 2, 4))
    r_q, r_kv = relevance_attention(P, c, r_out, LrpConfig(qk_share=0.0))
    np.testing.assert_array_equal(r_q, 0.0)
    np.testing.assert_allclose(r_kv[0, [0, 2]], 0.0, atol=1e-15)
    assert np.isclose(r_kv[0, 1].sum(), r_out.sum())


def test_uniform_attention_over_identical_values_splits_equally():
    P = _attention_params(seed=2)
    rng = np.random.default_rng(3)
    xq = rng.normal(size=(2, 4))
    xkv = np.repeat(rng.normal(size=(1, 4)), 4, axis=0)
    c = _attn(P, xq, xkv, np.ones((2, 4), dtype=bool), 2)
    np.testing.assert_allclose(c["a"], 0.25)
    r_out = rng.random((1, 2, 4))
    _, r_kv = relevance_attention(P, c, r_out, LrpConfig(qk_share=0.0))
    per_key = r_kv[0].sum(axis=1)
    np.testing.assert_allclose(per_key, r_out.sum() / 4, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_attention_block_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    d, H = 4, 2
    P = _attention_params(d, seed)
    xq, xkv = rng.normal(size=(2, d)), rng.normal(size=(2, d))
    c = _attn(P, xq, xkv, np.ones((2, 2), dtype=bool), H)
    r_out = rng.random((1, 2, d))
    diag = Diagnostics()
    r_q, r_kv = relevance_attention(P, c, r_out, CFG, diag)
    o = Oracle(P, 0, d, H)
    _, oc = o.attention("a.", xq.tolist(), xkv.tolist(), False)
    oq, okv = o.attn_rule(oc, r_out[0].tolist())
    np.testing.assert_allclose(r_q[0], oq, atol=1e-12)
    np.testing.assert_allclose(r_kv[0], okv, atol=1e-12)
    assert abs(r_q.sum() + r_kv.sum() - r_out.sum()) < 1e-5
    assert diag.max_conservation_error() < 1e-5


def _micro_model(seed):
    # one layer, width 2, one head, three regular tokens after the four reserved ids
    cfg = ModelConfig(vocab_size=7, n_layers=1, d_model=2, n_heads=1, d_ff=3, max_src_len=8, max_tgt_len=8)
    w = init_weights(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k in w.params:
        w.params[k] = w.params[k] + rng.normal(0.0, 0.3, w.params[k].shape)
    return w


def micro_cases(n=12):
    rng = np.random.default_rng(42)
    for i in range(n):
        src = [int(t) for t in rng.integers(4, 7, rng.integers(1, 5))]
        out = [int(t) for t in rng.integers(4, 7, rng.integers(1, 6))] + [EOS]
        yield i, src, out, (2 if i % 3 == 0 else 10)


@pytest.mark.parametrize("case", list(micro_cases()), ids=lambda c: f"case{c[0]}")
def test_token_contributions_match_loop_oracle(case):
    i, src, out, window = case
    w = _micro_model(i)
    R = lrp.token_contributions(src, out, w, LrpConfig(window=window))
    S, Pf = Oracle(w.params, 1, 2, 1).contributions(src, out, window)
    np.testing.assert_allclose(R.source, S, atol=1e-6, rtol=0)
    np.testing.assert_allclose(R.prefix, Pf, atol=1e-6, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(4, 8), min_size=1, max_size=6),
       st.lists(st.integers(2, 8), min_size=1, max_size=7))
def test_token_contributions_invariants(seed, src, out):
    w = random_model(seed=seed % 50, n_layers=2, scale=0.3)
    R = lrp.token_contributions(src, out, w)
    np.testing.assert_allclose(R.row_totals(), 1.0, atol=1e-12)
    assert (R.source >= 0).all() and (R.prefix >= 0).all()
    assert R.source.shape == (len(out), len(src) + 1)
    assert np.isclose(R.source[0].sum(), 1.0)
    np.testing.assert_array_equal(np.triu(R.prefix), 0.0)
    assert R.diagnostics.max_conservation_error() < 1e-9


def test_window_folds_old_prefix_mass():
    w = random_model(seed=5, scale=0.3)
    out = [4, 5, 6, 7, 8, 4, 5, EOS]
    R = lrp.token_contributions([4, 5], out, w, LrpConfig(window=3))
    for t in range(len(out)):
        assert not R.prefix[t, : max(t - 3, 0)].any()
    assert any(R.flags["window_folded"])
    np.testing.assert_allclose(R.row_totals(), 1.0, atol=1e-12)
    full = lrp.token_contributions([4, 5], out, w, LrpConfig(window=50))
    np.testing.assert_allclose(R.source[:4], full.source[:4], atol=1e-12)


def test_source_clip_and_errors():
    w = random_model(seed=1)
    R = lrp.token_contributions([4, 5, 6, 7, 8], [4, EOS], w, LrpConfig(src_clip=3))
    assert R.flags["src_clipped"] and R.n == 3
    with pytest.raises(ValueError, match="trace required"):
        lrp.token_contributions([4], [5], w, trace={"src": []})
    with pytest.raises(ValueError):
        lrp.token_contributions([4], [], w)
    with pytest.raises(ValueError, match="alpha"):
        LrpConfig(alpha=1.0, beta=0.5)


def test_supplied_trace_gives_same_result():
    w = random_model(seed=2, scale=0.2)
    tr = forward_trace(w, [4, 6], [5, 5, EOS])
    a = lrp.token_contributions([4, 6], [5, 5, EOS], w, trace=tr)
    b = lrp.token_contributions([4, 6], [5, 5, EOS], w)
    np.testing.assert_array_equal(a.source, b.source)


def test_attention_contributions_is_mean_of_heads():
    w = random_model(seed=3, n_layers=2, scale=0.2)
    src, out = [4, 5, 6], [7, 8, EOS]
    R = lrp.attention_contributions(src, out, w)
    np.testing.assert_allclose(R.source.sum(axis=1), 1.0, atol=1e-12)
    tr = forward_trace(w, src, out)
    c = tr["dec"]["layers"][-1]["cross"]
    heads = []
    for h in range(w.config.n_heads):
        q, k = c["qh"][0, h], c["kh"][0, h]
        s = q @ k.T / np.sqrt(q.shape[-1])
        e = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append(e / e.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(R.source, np.mean(heads, axis=0), atol=1e-12)
    single = lrp.attention_contributions([4], out, w)
    assert single.n == 2
    np.testing.assert_allclose(single.source.sum(axis=1), 1.0)


def test_records_round_trip():
    w = random_model(seed=4, scale=0.2)
    R = lrp.token_contributions([4, 5, 6], [7, 8, 4, EOS], w)
    back = lrp.from_records(lrp.to_records(R, "s1"))
    np.testing.assert_array_equal(back.source, R.source)
    np.testing.assert_array_equal(back.prefix, R.prefix)
    np.testing.assert_array_equal(back.norm, R.norm)
    text = lrp.dumps_records(lrp.to_records(R, "s1"))
    assert text.count("\n") == R.T
