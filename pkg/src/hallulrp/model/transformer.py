"""Post-LN Transformer encoder-decoder in numpy with an explicit backward pass.

Every forward function returns a cache dict alongside its output. The caches
double as the activation trace consumed by relevance propagation, so there is
a single forward code path for training, decoding and attribution.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from hallulrp.model.vocab import BOS, EOS, PAD


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_src_len: int = 32
    max_tgt_len: int = 32
    label_smoothing: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_ff", "max_src_len", "max_tgt_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TransformerWeights:
    config: ModelConfig
    params: dict
    vocab: object = None

    def copy(self):
        return TransformerWeights(self.config, {k: v.copy() for k, v in self.params.items()}, self.vocab)


def _attn_names(prefix):
    return [prefix + n for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def param_shapes(cfg):
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"src_emb": (V, d), "tgt_emb": (V, d)}

    def attn(prefix):
        for n in _attn_names(prefix):
            shapes[n] = (d, d) if n[-2] == "w" else (d,)

    def ln(prefix):
        shapes[prefix + "g"] = (d,)
        shapes[prefix + "b"] = (d,)

    def ffn(prefix):
        shapes.update({prefix + "w1": (d, f), prefix + "b1": (f,), prefix + "w2": (f, d), prefix + "b2": (d,)})

    for l in range(cfg.n_layers):
        attn(f"enc.{l}.attn.")
        ln(f"enc.{l}.ln1.")
        ffn(f"enc.{l}.ffn.")
        ln(f"enc.{l}.ln2.")
    for l in range(cfg.n_layers):
        attn(f"dec.{l}.self.")
        ln(f"dec.{l}.ln1.")
        attn(f"dec.{l}.cross.")
        ln(f"dec.{l}.ln2.")
        ffn(f"dec.{l}.ffn.")
        ln(f"dec.{l}.ln3.")
    shapes["out.w"] = (d, V)
    shapes["out.b"] = (V,)
    return shapes


def init_weights(cfg, seed=0, vocab=None):
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("_emb"):
            params[name] = rng.normal(0.0, cfg.d_model ** -0.5, shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "out.w":
            # near-uniform initial predictions: logit std ~0.1
            params[name] = rng.normal(0.0, 0.1 * cfg.d_model ** -0.5, shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, shape)
    return TransformerWeights(cfg, params, vocab)


def positional_encoding(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# --- layers -----------------------------------------------------------------

def attention_forward(P, prefix, xq, xkv, allowed, n_heads):
    """Multi-head attention. ``allowed`` is a (B, Lq, Lk) boolean mask."""
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dh = d // n_heads
    q = xq @ P[prefix + "wq"] + P[prefix + "bq"]
    k = xkv @ P[prefix + "wk"] + P[prefix + "bk"]
    v = xkv @ P[prefix + "wv"] + P[prefix + "bv"]
    qh = q.reshape(B, Lq, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, Lk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(dh)
    scores = np.where(allowed[:, None], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    a = e / e.sum(axis=-1, keepdims=True)
    o = (a @ vh).transpose(0, 2, 1, 3).reshape(B, Lq, d)
    out = o @ P[prefix + "wo"] + P[prefix + "bo"]
    cache = {"prefix": prefix, "xq": xq, "xkv": xkv, "q": q, "k": k, "v": v,
             "qh": qh, "kh": kh, "vh": vh, "a": a, "o": o, "out": out, "n_heads": n_heads}
    return out, cache


def attention_backward(P, G, c, dout):
    prefix, H = c["prefix"], c["n_heads"]
    B, Lq, d = c["xq"].shape
    Lk = c["xkv"].shape[1]
    dh = d // H
    G[prefix + "wo"] += c["o"].reshape(-1, d).T @ dout.reshape(-1, d)
    G[prefix + "bo"] += dout.sum(axis=(0, 1))
    do = dout @ P[prefix + "wo"].T
    doh = do.reshape(B, Lq, H, dh).transpose(0, 2, 1, 3)
    a = c["a"]
    da = doh @ c["vh"].transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ doh
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
    dqh = ds @ c["kh"]
    dkh = ds.transpose(0, 1, 3, 2) @ c["qh"]
    dq = dqh.transpose(0, 2, 1, 3).reshape(B, Lq, d)
    dk = dkh.transpose(0, 2, 1, 3).reshape(B, Lk, d)
    dv = dvh.transpose(0, 2, 1, 3).reshape(B, Lk, d)
    xq = c["xq"].reshape(-1, d)
    xkv = c["xkv"].reshape(-1, d)
    G[prefix + "wq"] += xq.T @ dq.reshape(-1, d)
    G[prefix + "bq"] += dq.sum(axis=(0, 1))
    G[prefix + "wk"] += xkv.T @ dk.reshape(-1, d)
    G[prefix + "bk"] += dk.sum(axis=(0, 1))
    G[prefix + "wv"] += xkv.T @ dv.reshape(-1, d)
    G[prefix + "bv"] += dv.sum(axis=(0, 1))
    dxq = dq @ P[prefix + "wq"].T
    dxkv = dk @ P[prefix + "wk"].T + dv @ P[prefix + "wv"].T
    return dxq, dxkv


def layernorm_forward(P, prefix, x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * P[prefix + "g"] + P[prefix + "b"]
    return y, {"prefix": prefix, "x": x, "xhat": xhat, "inv": inv, "out": y}


def layernorm_backward(P, G, c, dy):
    prefix = c["prefix"]
    d = dy.shape[-1]
    G[prefix + "g"] += (dy * c["xhat"]).reshape(-1, d).sum(axis=0)
    G[prefix + "b"] += dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * P[prefix + "g"]
    xhat = c["xhat"]
    return c["inv"] * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                       - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def ffn_forward(P, prefix, x):
    pre = x @ P[prefix + "w1"] + P[prefix + "b1"]
    h = np.maximum(pre, 0.0)
    y = h @ P[prefix + "w2"] + P[prefix + "b2"]
    return y, {"prefix": prefix, "x": x, "pre": pre, "h": h, "out": y}


def ffn_backward(P, G, c, dy):
    prefix = c["prefix"]
    d, f = P[prefix + "w1"].shape
    G[prefix + "w2"] += c["h"].reshape(-1, f).T @ dy.reshape(-1, d)
    G[prefix + "b2"] += dy.reshape(-1, d).sum(axis=0)
    dpre = (dy @ P[prefix + "w2"].T) * (c["pre"] > 0)
    G[prefix + "w1"] += c["x"].reshape(-1, d).T @ dpre.reshape(-1, f)
    G[prefix + "b1"] += dpre.reshape(-1, f).sum(axis=0)
    return dpre @ P[prefix + "w1"].T


def _embed(P, table, ids, d):
    pe = positional_encoding(ids.shape[1], d)
    x = P[table][ids] * math.sqrt(d) + pe
    return x, {"table": table, "ids": ids, "out": x}


def _embed_backward(G, c, dx, d):
    np.add.at(G[c["table"]], c["ids"], dx * math.sqrt(d))


# --- encoder / decoder ------------------------------------------------------

def encode_forward(w, src, src_mask):
    """src: (B, S) ids; src_mask: (B, S) True on real tokens."""
    cfg, P = w.config, w.params
    x, emb = _embed(P, "src_emb", src, cfg.d_model)
    allowed = np.broadcast_to(src_mask[:, None, :], (src.shape[0], src.shape[1], src.shape[1]))
    layers = []
    for l in range(cfg.n_layers):
        a, ca = attention_forward(P, f"enc.{l}.attn.", x, x, allowed, cfg.n_heads)
        h, c1 = layernorm_forward(P, f"enc.{l}.ln1.", x + a, cfg.ln_eps)
        f, cf = ffn_forward(P, f"enc.{l}.ffn.", h)
        out, c2 = layernorm_forward(P, f"enc.{l}.ln2.", h + f, cfg.ln_eps)
        layers.append({"x": x, "attn": ca, "ln1": c1, "ffn": cf, "ln2": c2})
        x = out
    return x, {"emb": emb, "layers": layers, "src_mask": src_mask}


def decode_forward(w, tgt_in, tgt_mask, mem, src_mask):
    """tgt_in: (B, T) decoder inputs starting with BOS; returns logits (B, T, V)."""
    cfg, P = w.config, w.params
    B, T = tgt_in.shape
    y, emb = _embed(P, "tgt_emb", tgt_in, cfg.d_model)
    causal = np.tril(np.ones((T, T), dtype=bool))
    self_allowed = causal[None] & tgt_mask[:, None, :]
    cross_allowed = np.broadcast_to(src_mask[:, None, :], (B, T, src_mask.shape[1]))
    layers = []
    for l in range(cfg.n_layers):
        a, cs = attention_forward(P, f"dec.{l}.self.", y, y, self_allowed, cfg.n_heads)
        h1, c1 = layernorm_forward(P, f"dec.{l}.ln1.", y + a, cfg.ln_eps)
        x, cx = attention_forward(P, f"dec.{l}.cross.", h1, mem, cross_allowed, cfg.n_heads)
        h2, c2 = layernorm_forward(P, f"dec.{l}.ln2.", h1 + x, cfg.ln_eps)
        f, cf = ffn_forward(P, f"dec.{l}.ffn.", h2)
        out, c3 = layernorm_forward(P, f"dec.{l}.ln3.", h2 + f, cfg.ln_eps)
        layers.append({"y": y, "self": cs, "ln1": c1, "cross": cx, "ln2": c2, "ffn": cf, "ln3": c3})
        y = out
    logits = y @ P["out.w"] + P["out.b"]
    return logits, {"emb": emb, "layers": layers, "final": y, "logits": logits, "tgt_mask": tgt_mask}


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# --- batches and loss -------------------------------------------------------

def pad_batch(seqs, pad=PAD):
    length = max(len(s) for s in seqs)
    out = np.full((len(seqs), length), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def make_batch(pairs):
    """pairs of (source ids, target ids) without specials -> padded arrays."""
    src = pad_batch([list(s) + [EOS] for s, _ in pairs])
    tgt_in = pad_batch([[BOS] + list(t) for _, t in pairs])
    tgt_out = pad_batch([list(t) + [EOS] for _, t in pairs])
    return src, tgt_in, tgt_out


def forward_loss(w, src, tgt_in, tgt_out):
    """Label-smoothed cross-entropy averaged over non-pad target positions."""
    src_mask = src != PAD
    tgt_mask = tgt_in != PAD
    tgt_mask[:, 0] = True
    mem, enc = encode_forward(w, src, src_mask)
    logits, dec = decode_forward(w, tgt_in, tgt_mask, mem, src_mask)
    logp = log_softmax(logits)
    valid = tgt_out != PAD
    n_valid = valid.sum()
    eps = w.config.label_smoothing
    V = logits.shape[-1]
    nll = -np.take_along_axis(logp, tgt_out[..., None], axis=-1)[..., 0]
    smooth = -logp.mean(axis=-1)
    loss = float((((1 - eps) * nll + eps * smooth) * valid).sum() / n_valid)
    cache = {"enc": enc, "dec": dec, "logp": logp, "tgt_out": tgt_out, "valid": valid, "n_valid": n_valid, "mem": mem}
    return loss, cache


def backward_loss(w, cache):
    cfg, P = w.config, w.params
    G = {k: np.zeros_like(v) for k, v in P.items()}
    logp, tgt_out, valid = cache["logp"], cache["tgt_out"], cache["valid"]
    eps = cfg.label_smoothing
    V = logp.shape[-1]
    target = np.full(logp.shape, eps / V)
    np.put_along_axis(target, tgt_out[..., None], (1 - eps) + eps / V, axis=-1)
    dlogits = (np.exp(logp) - target) * valid[..., None] / cache["n_valid"]
    dec = cache["dec"]
    d = cfg.d_model
    G["out.w"] += dec["final"].reshape(-1, d).T @ dlogits.reshape(-1, V)
    G["out.b"] += dlogits.reshape(-1, V).sum(axis=0)
    dy = dlogits @ P["out.w"].T
    dmem = np.zeros_like(cache["mem"])
    for layer in reversed(dec["layers"]):
        dr3 = layernorm_backward(P, G, layer["ln3"], dy)
        dh2 = dr3 + ffn_backward(P, G, layer["ffn"], dr3)
        dr2 = layernorm_backward(P, G, layer["ln2"], dh2)
        dh1_cross, dm = attention_backward(P, G, layer["cross"], dr2)
        dmem += dm
        dh1 = dr2 + dh1_cross
        dr1 = layernorm_backward(P, G, layer["ln1"], dh1)
        dq, dkv = attention_backward(P, G, layer["self"], dr1)
        dy = dr1 + dq + dkv
    _embed_backward(G, dec["emb"], dy, d)
    dx = dmem
    for layer in reversed(cache["enc"]["layers"]):
        dr2 = layernorm_backward(P, G, layer["ln2"], dx)
        dh = dr2 + ffn_backward(P, G, layer["ffn"], dr2)
        dr1 = layernorm_backward(P, G, layer["ln1"], dh)
        dq, dkv = attention_backward(P, G, layer["attn"], dr1)
        dx = dr1 + dq + dkv
    _embed_backward(G, cache["enc"]["emb"], dx, d)
    return G


def loss_and_grad(w, src, tgt_in, tgt_out):
    loss, cache = forward_loss(w, src, tgt_in, tgt_out)
    return loss, backward_loss(w, cache)


# --- single-sample entry points ---------------------------------------------

def check_source(src_ids, cfg):
    src_ids = list(src_ids)
    if any(t == PAD for t in src_ids):
        raise ValueError("padding id inside source")
    if len(src_ids) + 1 > cfg.max_src_len:
        raise ValueError("source too long")
    return src_ids


def encode(src_ids, w):
    """Encode one source (EOS appended). Returns (states (n, d), trace fragment)."""
    src_ids = check_source(src_ids, w.config)
    src = np.array([src_ids + [EOS]], dtype=np.int64)
    mem, cache = encode_forward(w, src, np.ones_like(src, dtype=bool))
    return mem[0], cache


def forward_trace(w, src_ids, out_ids):
    """Teacher-forced pass over ``out_ids`` recording every sub-layer.

    Position t of the decoder predicts ``out_ids[t]``; causal masking makes
    its activations identical to those seen at decoding step t.
    """
    src_ids = check_source(src_ids, w.config)
    out_ids = list(out_ids)
    if not out_ids:
        raise ValueError("output must be non-empty")
    src = np.array([src_ids + [EOS]], dtype=np.int64)
    tgt_in = np.array([[BOS] + out_ids[:-1]], dtype=np.int64)
    src_mask = np.ones_like(src, dtype=bool)
    mem, enc = encode_forward(w, src, src_mask)
    logits, dec = decode_forward(w, tgt_in, np.ones_like(tgt_in, dtype=bool), mem, src_mask)
    return {"src": src[0], "tgt_in": tgt_in[0], "out": np.array(out_ids), "enc": enc, "dec": dec,
            "logp": log_softmax(logits)[0], "config": w.config}
