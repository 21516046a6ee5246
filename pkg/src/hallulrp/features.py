"""Contribution-pattern metrics and the detector feature vector.

All functions accept a ``RelevanceMatrix`` or a plain (T, n) array of source
contributions ``R_t(x_i)``; only the source part is used. The EOS token is
the last source position and counts towards ``n``.
"""
from dataclasses import dataclass, field

import numpy as np


def _source(R):
    S = np.asarray(getattr(R, "source", R), dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] < 1:
        raise ValueError("expected a non-empty (steps, positions) matrix")
    return S


def _step_distributions(S):
    tot = S.sum(axis=1, keepdims=True)
    if (tot <= 0).any():
        raise ValueError("degenerate step")
    return S / tot


def relative_source_contribution(R):
    """sum_i R_t(x_i) for every step t."""
    return _source(R).sum(axis=1)


def normalized_source_contribution(R):
    """R-bar(x_i) = mean_t n * R_t(x_i) / sum_i R_t(x_i); its mean over i is 1."""
    S = _source(R)
    return S.shape[1] * _step_distributions(S).mean(axis=0)


def high_contribution_ratio(rbar, lam0):
    """Fraction of source positions whose normalized contribution exceeds lam0."""
    rbar = np.asarray(rbar, dtype=np.float64)
    return float((rbar > lam0).mean())


def staticity(R, k):
    """Mean cosine similarity of adjacent k-step segment averages.

    Each step's source row is first normalized to a distribution, so the
    score ignores per-step source mass. Trailing steps that do not fill a
    segment are dropped.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    D = _step_distributions(_source(R))
    m = D.shape[0] // k
    if m < 2:
        raise ValueError("sequence too short for k")
    seg = D[:m * k].reshape(m, k, -1).mean(axis=1)
    sq = (seg * seg).sum(axis=1)
    # one square root of the product rounds less than a product of two norms
    cos = (seg[:-1] * seg[1:]).sum(axis=1) / np.sqrt(sq[:-1] * sq[1:])
    return float(np.clip(cos.mean(), 0.0, 1.0))


def valid_windows(T, k_max):
    return [k for k in range(1, k_max + 1) if T // k >= 2]


def max_staticity(R, k_max=3):
    ks = valid_windows(_source(R).shape[0], k_max)
    if not ks:
        raise ValueError("no valid window size")
    return max(staticity(R, k) for k in ks)


def eos_contribution_share(R):
    """Mean over steps of the EOS share of source contribution."""
    return float(_step_distributions(_source(R))[:, -1].mean())


@dataclass
class ContributionFeatures:
    relative_source: np.ndarray
    rbar: np.ndarray
    high_ratio: float
    staticity: np.ndarray
    eos_share: float
    vector: np.ndarray
    fallback_k: list = field(default_factory=list)


def build_feature_vector(R, K1=3, K2=3):
    """[R-bar of first K1 positions, R-bar of last K1 positions, s_1..s_K2].

    A window k with fewer than two full segments takes the staticity of the
    largest valid window; such k are returned as the second value.
    """
    S = _source(R)
    T, n = S.shape
    if n < 2 * K1:
        raise ValueError("source too short for K1")
    ks = valid_windows(T, K2)
    if not ks:
        raise ValueError("output too short for staticity (need at least 2 steps)")
    rbar = normalized_source_contribution(S)
    s = {k: staticity(S, k) for k in ks}
    fallback = [k for k in range(1, K2 + 1) if k not in s]
    svec = [s.get(k, s[ks[-1]]) for k in range(1, K2 + 1)]
    vec = np.concatenate([rbar[:K1], rbar[n - K1:], svec])
    return vec, fallback


def compute_features(R, K1=3, K2=3, lam0=1.0):
    S = _source(R)
    vec, fallback = build_feature_vector(S, K1, K2)
    return ContributionFeatures(
        relative_source=relative_source_contribution(R),
        rbar=normalized_source_contribution(S),
        high_ratio=high_contribution_ratio(normalized_source_contribution(S), lam0),
        staticity=vec[2 * K1:],
        eos_share=eos_contribution_share(S),
        vector=vec,
        fallback_k=fallback,
    )
