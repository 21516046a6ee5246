"""Alpha-beta relevance propagation through the toy Transformer.

Relevance for every decoding step is propagated at once: a relevance tensor
has shape (steps, positions, dims), and message ratios depend only on the
forward activations, so each layer's ratios are computed once and applied to
all steps with one einsum.

Rules used per sub-layer:

* linear ``y = x W + b``: ratios of ``z_ij = x_i W_ij`` over ``i``; the bias is
  left out of the denominators so relevance is conserved, and the share it
  would have absorbed is recorded as ``bias_leak``.
* layer norm: linear in its input with the scale ``1/sigma`` frozen, i.e.
  ``W_ij = g_j / sigma * (delta_ij - 1/d)``.
* residual ``x + F(x)``: per dimension, ratios over the two summands.
* ReLU: relevance passes through unchanged.
* attention: the output projection is a linear rule; each head output
  ``o_qc = sum_k a_qk v_kc`` is split over keys by ``a_qk v_kc``. A share
  ``1 - qk_share`` flows into the values, the rest into the scores
  ``s_qk = q_q . k_k`` (softmax is a pass-through), and each score is split
  over head dims by ``q_qm k_km`` with half to the query and half to the key.

A column whose positive (or negative) mass is not above ``eps`` falls back to
|z| ratios and is counted in ``Diagnostics.fallbacks``.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from hallulrp._kernels import ab_ratios
from hallulrp.model.transformer import check_source, forward_trace


@dataclass(frozen=True)
class LrpConfig:
    alpha: float = 1.0
    beta: float = 0.0
    src_clip: int = 40
    window: int = 10
    eps: float = 1e-9
    # share of attention relevance routed through queries/keys
    qk_share: float = 0.5

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ValueError("alpha + beta must equal 1")
        if self.src_clip < 1 or self.window < 1:
            raise ValueError("src_clip and window must be >= 1")
        if not 0.0 <= self.qk_share <= 1.0:
            raise ValueError("qk_share must be in [0, 1]")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class Diagnostics:
    """Per sub-layer conservation error and bias leak, before normalization."""

    conservation: dict = field(default_factory=dict)
    bias_leak: dict = field(default_factory=dict)
    fallbacks: int = 0

    def check(self, name, r_in, r_out):
        err = float(np.max(np.abs(_step_totals(r_in) - _step_totals(r_out)), initial=0.0))
        self.conservation[name] = max(err, self.conservation.get(name, 0.0))

    def max_conservation_error(self):
        return max(self.conservation.values(), default=0.0)


def _step_totals(r):
    r = np.asarray(r)
    return r.reshape(r.shape[0], -1).sum(axis=1) if r.ndim > 1 else np.array([r.sum()])


def _ratios(Z, cfg, diag):
    V, fb = ab_ratios(Z, cfg.alpha, cfg.beta, cfg.eps)
    if diag is not None:
        diag.fallbacks += int(fb.sum())
    return V


def _bias_leak(Z, b, cfg):
    """Share of each output's relevance the bias would take under the literal rule."""
    zp = np.maximum(Z, 0.0).sum(axis=1)
    zn = np.minimum(Z, 0.0).sum(axis=1)
    bp, bn = np.maximum(b, 0.0), np.minimum(b, 0.0)
    leak = np.zeros_like(zp)
    if cfg.alpha:
        den = zp + bp
        leak += cfg.alpha * np.divide(bp, den, out=np.zeros_like(den), where=den > cfg.eps)
    if cfg.beta:
        den = zn + bn
        leak += cfg.beta * np.divide(bn, den, out=np.zeros_like(den), where=den < -cfg.eps)
    return leak


def _apply(V, r_out):
    """V: (P, I, O); r_out: (S, P, O) -> (S, P, I)."""
    return np.einsum("pio,spo->spi", V, r_out, optimize=True)


def relevance_linear(x, W, r_out, cfg=LrpConfig(), b=None, diag=None, name="linear"):
    """Alpha-beta rule for ``y = x W + b``.

    Shapes: ``x`` (P, I) or (I,), ``W`` (I, O), ``r_out`` (S, P, O), (P, O) or
    (O,) matching ``x``. Returns relevance over inputs with the matching shape.
    """
    x = np.asarray(x, dtype=np.float64)
    r_out = np.asarray(r_out, dtype=np.float64)
    single = x.ndim == 1
    squeeze = r_out.ndim == x.ndim  # no leading steps axis
    if single:
        x = x[None]
        r_out = r_out[..., None, :]
    r = r_out[None] if squeeze else r_out
    Z = x[:, :, None] * W[None]
    V = _ratios(Z, cfg, diag)
    r_in = _apply(V, r)
    if diag is not None:
        diag.check(name, r_in, r)
        if b is not None:
            leak = _bias_leak(Z, np.asarray(b), cfg)
            total = np.abs(r).sum()
            diag.bias_leak[name] = float((np.abs(r) * leak[None]).sum() / total) if total else 0.0
    if squeeze:
        r_in = r_in[0]
    return r_in[..., 0, :] if single else r_in


def relevance_layernorm(c, r_out, cfg, diag=None, name="ln"):
    x, inv, g = c["x"][0], c["inv"][0], c["g"]
    d = x.shape[-1]
    # W[p, i, j] = g_j * inv_p * (delta_ij - 1/d)
    W = (np.eye(d) - 1.0 / d)[None] * (g[None, None, :] * inv[:, :, None])
    Z = x[:, :, None] * W
    r_in = _apply(_ratios(Z, cfg, diag), r_out)
    if diag is not None:
        diag.check(name, r_in, r_out)
    return r_in


def relevance_residual(a, b, r_out, cfg, diag=None, name="residual"):
    """Split relevance of ``a + b`` per dimension; a, b: (P, d)."""
    Z = np.stack([a, b], axis=1)
    V = _ratios(Z, cfg, diag)
    r_a = V[None, :, 0, :] * r_out
    r_b = V[None, :, 1, :] * r_out
    if diag is not None:
        diag.check(name, r_a + r_b, r_out)
    return r_a, r_b


def relevance_ffn(P, c, r_out, cfg, diag=None, name="ffn"):
    prefix = c["prefix"]
    r_h = relevance_linear(c["h"][0], P[prefix + "w2"], r_out, cfg, P[prefix + "b2"], diag, name + ".w2")
    return relevance_linear(c["x"][0], P[prefix + "w1"], r_h, cfg, P[prefix + "b1"], diag, name + ".w1")


def relevance_attention(P, c, r_out, cfg=LrpConfig(), diag=None, name="attn"):
    """Relevance of a multi-head attention block onto its query and key/value inputs.

    ``c`` is the forward cache of one batch element (batch index 0);
    ``r_out`` has shape (S, Lq, d). Returns (r_xq, r_xkv).
    """
    prefix, H = c["prefix"], c["n_heads"]
    xq, xkv = c["xq"][0], c["xkv"][0]
    a, qh, kh, vh = c["a"][0], c["qh"][0], c["kh"][0], c["vh"][0]
    Lq, d = xq.shape
    Lk = xkv.shape[0]
    dh = d // H
    S = r_out.shape[0]
    if not (np.isfinite(a).all() and np.isfinite(qh).all() and np.isfinite(kh).all()):
        raise FloatingPointError(f"{name}: non-finite attention activations")

    r_o = relevance_linear(c["o"][0], P[prefix + "wo"], r_out, cfg, P[prefix + "bo"], diag, name + ".wo")
    r_oh = r_o.reshape(S, Lq, H, dh)

    # mixing over keys: Z[(q, h), k, c] = a[h, q, k] * v[h, k, c]
    Z = a.transpose(1, 0, 2)[:, :, :, None] * vh[None]
    V = _ratios(Z.reshape(Lq * H, Lk, dh), cfg, diag).reshape(Lq, H, Lk, dh)
    per_key = np.einsum("qhkc,sqhc->sqhkc", V, r_oh, optimize=True)
    r_vh = (1.0 - cfg.qk_share) * per_key.sum(axis=1)  # (S, H, Lk, dh)
    r_score = cfg.qk_share * per_key.sum(axis=-1)  # (S, Lq, H, Lk)

    # score s_qk = sum_m q_qm k_km, half of each term to q_m and half to k_m
    Zs = qh.transpose(1, 0, 2)[:, :, None, :] * kh[None]  # (Lq, H, Lk, dh)
    Vs = _ratios(Zs.reshape(Lq * H * Lk, dh, 1), cfg, diag).reshape(Lq, H, Lk, dh)
    split = np.einsum("qhkm,sqhk->sqhkm", Vs, r_score, optimize=True)
    r_qh = 0.5 * split.sum(axis=3)  # (S, Lq, H, dh)
    r_kh = 0.5 * split.sum(axis=1)  # (S, H, Lk, dh)

    r_q = r_qh.reshape(S, Lq, d)
    r_k = r_kh.transpose(0, 2, 1, 3).reshape(S, Lk, d)
    r_v = r_vh.transpose(0, 2, 1, 3).reshape(S, Lk, d)
    if diag is not None:
        diag.check(name + ".heads", np.concatenate([r_q, r_k, r_v], axis=1), r_o)

    r_xq = relevance_linear(xq, P[prefix + "wq"], r_q, cfg, P[prefix + "bq"], diag, name + ".wq")
    r_xkv = (relevance_linear(xkv, P[prefix + "wk"], r_k, cfg, P[prefix + "bk"], diag, name + ".wk")
             + relevance_linear(xkv, P[prefix + "wv"], r_v, cfg, P[prefix + "bv"], diag, name + ".wv"))
    return r_xq, r_xkv


def _ln_cache(P, c):
    return {"x": c["x"], "inv": c["inv"], "g": P[c["prefix"] + "g"]}


@dataclass
class RelevanceMatrix:
    """Per-step contributions of source positions and target-prefix tokens.

    ``source[t, i]`` is R_t(x_i) over the encoded source (EOS last) and
    ``prefix[t, j]`` is R_t(y_j) for output tokens j < t inside the window
    (zero elsewhere). Rows satisfy ``source.sum(1) + prefix.sum(1) == 1``.
    ``norm[t]`` is the row mass before the final rescale.
    """

    source: np.ndarray
    prefix: np.ndarray
    norm: np.ndarray
    src_tokens: list = field(default_factory=list)
    out_tokens: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    diagnostics: Diagnostics = None

    @property
    def T(self):
        return self.source.shape[0]

    @property
    def n(self):
        return self.source.shape[1]

    def row_totals(self):
        return self.source.sum(axis=1) + self.prefix.sum(axis=1)


def _clip_source(src_ids, cfg):
    src_ids = list(src_ids)
    if len(src_ids) + 1 > cfg.src_clip:
        return src_ids[:cfg.src_clip - 1], True
    return src_ids, False


def propagate(w, trace, cfg=LrpConfig(), diag=None):
    """Raw (unnormalized) relevance on source and decoder-input embeddings.

    Returns (r_src (T, n), r_dec (T, T)) where row t is decoding step t and
    decoder column 0 is BOS.
    """
    P = w.params
    dec, enc = trace["dec"], trace["enc"]
    out = trace["out"]
    T = len(out)
    final = dec["final"][0]
    d = final.shape[-1]

    # seed: logit of the emitted token at each step
    Z = final[:, :, None] * P["out.w"][:, out].T[:, :, None]  # (T, d, 1)
    V = _ratios(Z, cfg, diag)[:, :, 0]
    r_y = np.zeros((T, T, d))
    r_y[np.arange(T), np.arange(T)] = V
    if diag is not None:
        diag.check("out", r_y, np.ones((T, 1)))
        diag.bias_leak["out"] = float(_bias_leak(Z, P["out.b"][out][:, None], cfg).mean())

    n = enc["layers"][0]["x"].shape[1] if enc["layers"] else enc["emb"]["out"].shape[1]
    r_mem = np.zeros((T, n, d))
    for l in reversed(range(len(dec["layers"]))):
        L = dec["layers"][l]
        tag = f"dec.{l}"
        r_r3 = relevance_layernorm(_ln_cache(P, L["ln3"]), r_y, cfg, diag, tag + ".ln3")
        r_h2, r_f = relevance_residual(L["ln2"]["out"][0], L["ffn"]["out"][0], r_r3, cfg, diag, tag + ".res3")
        r_h2 = r_h2 + relevance_ffn(P, L["ffn"], r_f, cfg, diag, tag + ".ffn")
        r_r2 = relevance_layernorm(_ln_cache(P, L["ln2"]), r_h2, cfg, diag, tag + ".ln2")
        r_h1, r_x = relevance_residual(L["ln1"]["out"][0], L["cross"]["out"][0], r_r2, cfg, diag, tag + ".res2")
        r_q, r_m = relevance_attention(P, L["cross"], r_x, cfg, diag, tag + ".cross")
        r_h1 = r_h1 + r_q
        r_mem = r_mem + r_m
        r_r1 = relevance_layernorm(_ln_cache(P, L["ln1"]), r_h1, cfg, diag, tag + ".ln1")
        r_in, r_a = relevance_residual(L["y"][0], L["self"]["out"][0], r_r1, cfg, diag, tag + ".res1")
        r_q, r_kv = relevance_attention(P, L["self"], r_a, cfg, diag, tag + ".self")
        r_y = r_in + r_q + r_kv

    r_x = r_mem
    for l in reversed(range(len(enc["layers"]))):
        L = enc["layers"][l]
        tag = f"enc.{l}"
        r_r2 = relevance_layernorm(_ln_cache(P, L["ln2"]), r_x, cfg, diag, tag + ".ln2")
        r_h, r_f = relevance_residual(L["ln1"]["out"][0], L["ffn"]["out"][0], r_r2, cfg, diag, tag + ".res2")
        r_h = r_h + relevance_ffn(P, L["ffn"], r_f, cfg, diag, tag + ".ffn")
        r_r1 = relevance_layernorm(_ln_cache(P, L["ln1"]), r_h, cfg, diag, tag + ".ln1")
        r_in, r_a = relevance_residual(L["x"][0], L["attn"]["out"][0], r_r1, cfg, diag, tag + ".res1")
        r_q, r_kv = relevance_attention(P, L["attn"], r_a, cfg, diag, tag + ".attn")
        r_x = r_in + r_q + r_kv

    # token relevance = relevance on the embedding-sum input, summed over dims
    return r_x.sum(axis=-1), r_y.sum(axis=-1)


def token_contributions(src, out, w, cfg=LrpConfig(), trace=None):
    """RelevanceMatrix for emitting ``out`` (EOS included if present) from ``src``.

    ``trace`` may be a forward trace from ``forward_trace``; otherwise one is
    computed by force-decoding ``out``.
    """
    src, clipped = _clip_source(src, cfg)
    check_source(src, w.config)
    out = list(out)
    if not out:
        raise ValueError("output must be non-empty")
    if trace is None or clipped:
        trace = forward_trace(w, src, out)
    elif "dec" not in trace or "enc" not in trace:
        raise ValueError("trace required")
    diag = Diagnostics()
    r_src, r_dec = propagate(w, trace, cfg, diag)
    T = len(out)
    if not (np.isfinite(r_src).all() and np.isfinite(r_dec).all()):
        bad = int(np.where(~(np.isfinite(r_src).all(1) & np.isfinite(r_dec).all(1)))[0][0])
        raise FloatingPointError(f"non-finite relevance at step {bad}")

    # decoder position j + 1 holds output token j; position 0 is BOS
    bos_mass = r_dec[:, 0].copy()
    prefix = np.zeros((T, T))
    prefix[:, :T - 1] = r_dec[:, 1:]
    prefix = np.tril(prefix, k=-1)
    folded = np.zeros(T, dtype=bool)
    for t in range(T):
        lo = t - cfg.window
        if lo > 0:
            old = prefix[t, :lo].sum()
            if old != 0.0:
                keep = prefix[t, lo:t]
                s = keep.sum()
                prefix[t, lo:t] = keep + old * (keep / s if s > cfg.eps else 1.0 / keep.size)
                folded[t] = True
            prefix[t, :lo] = 0.0
    norm = r_src.sum(axis=1) + prefix.sum(axis=1)
    if (norm <= cfg.eps).any():
        bad = int(np.where(norm <= cfg.eps)[0][0])
        raise FloatingPointError(f"degenerate relevance mass at step {bad}")
    flags = {
        "src_clipped": clipped,
        "bos_mass": bos_mass.tolist(),
        "window_folded": folded.tolist(),
        "fallbacks": diag.fallbacks,
    }
    return RelevanceMatrix(r_src / norm[:, None], prefix / norm[:, None], norm,
                           list(src), out, flags, diag)


def attention_contributions(src, out, w, layer=-1, trace=None):
    """Cross-attention weights of one decoder layer averaged over heads.

    Prefix entries are zero so rows sum to one over the source.
    """
    src = check_source(src, w.config)
    out = list(out)
    if trace is None:
        trace = forward_trace(w, src, out)
    a = trace["dec"]["layers"][layer]["cross"]["a"][0]  # (H, T, n)
    src_part = a.mean(axis=0)
    T = src_part.shape[0]
    return RelevanceMatrix(src_part, np.zeros((T, T)), np.ones(T), list(src), out,
                           {"mode": "attention", "layer": layer})


def to_records(R, sample_id=None):
    """One plain-dict record per step; floats are kept at full precision."""
    recs = []
    for t in range(R.T):
        recs.append({
            "id": sample_id,
            "step": t,
            "source": R.source[t].tolist(),
            "prefix": R.prefix[t, :t].tolist(),
            "norm": float(R.norm[t]),
        })
    return recs


def from_records(recs):
    recs = sorted(recs, key=lambda r: r["step"])
    T = len(recs)
    n = len(recs[0]["source"])
    source = np.array([r["source"] for r in recs], dtype=np.float64).reshape(T, n)
    prefix = np.zeros((T, T))
    for t, r in enumerate(recs):
        prefix[t, :len(r["prefix"])] = r["prefix"]
    return RelevanceMatrix(source, prefix, np.array([r["norm"] for r in recs]))


def dumps_records(recs):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in recs)
