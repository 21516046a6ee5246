"""Hallucination detectors: the feature MLP, model-free baselines and ensembles.

Every detector maps samples to scores (higher = more hallucination-like) and
binary decisions. A sample is a dict with ``label`` and whichever inputs the
detector needs: ``features`` (mode -> vector), ``src``/``out`` token lists and
``nmt_score`` (length-normalised log-probability of ``out``).
"""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from hallulrp import metrics

KINDS = ("lrp-mlp", "attention-mlp", "random", "degeneration", "nmt-score", "ensemble-and")
SCORING_KINDS = ("lrp-mlp", "attention-mlp", "random", "nmt-score")
FORMAT_VERSION = 1


class MlpDivergedError(RuntimeError):
    pass


@dataclass
class MlpHyper:
    hidden: int = 16
    lr: float = 0.5
    epochs: int = 1500
    patience: int = 300
    threshold: float = 0.5

    def to_dict(self):
        return asdict(self)


@dataclass
class MlpParams:
    """One hidden tanh layer with a sigmoid output over z-scored features.

    ``keep`` lists the input dimensions used; dimensions with zero training
    variance are dropped and recorded in ``dropped``.
    """

    in_dim: int
    keep: list
    mean: np.ndarray
    std: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    activation: str = "tanh"
    dropped: list = field(default_factory=list)

    @property
    def n_params(self):
        return self.W1.size + self.b1.size + self.W2.size + 1

    def to_dict(self):
        return {"in_dim": self.in_dim, "keep": list(self.keep), "dropped": list(self.dropped),
                "mean": self.mean.tolist(), "std": self.std.tolist(), "W1": self.W1.tolist(),
                "b1": self.b1.tolist(), "W2": self.W2.tolist(), "b2": float(self.b2),
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(d["in_dim"], list(d["keep"]), np.array(d["mean"]), np.array(d["std"]),
                   np.array(d["W1"]).reshape(len(d["keep"]), -1), np.array(d["b1"]),
                   np.array(d["W2"]), float(d["b2"]), d.get("activation", "tanh"), list(d.get("dropped", [])))


def fit_standardizer(X, tol=1e-12):
    X = np.asarray(X, dtype=np.float64)
    mean, std = X.mean(axis=0), X.std(axis=0)
    keep = [i for i in range(X.shape[1]) if std[i] > tol]
    dropped = [i for i in range(X.shape[1]) if std[i] <= tol]
    return keep, dropped, mean[keep], std[keep]


def standardize(params, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.in_dim:
        raise ValueError(f"feature length {X.shape[1]} != input dimension {params.in_dim}")
    return (X[:, params.keep] - params.mean) / params.std


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _hidden(params, Xs):
    return np.tanh(Xs @ params.W1 + params.b1)


def mlp_forward(params, X):
    """Hallucination probability for one feature vector or a (N, in_dim) matrix."""
    single = np.asarray(X).ndim == 1
    p = _sigmoid(_hidden(params, standardize(params, X)) @ params.W2 + params.b2)
    return float(p[0]) if single else p


def mlp_loss_and_grad(params, Xs, y):
    """Mean binary cross-entropy on standardized inputs and its gradients."""
    y = np.asarray(y, dtype=np.float64)
    h = _hidden(params, Xs)
    z = h @ params.W2 + params.b2
    # log(1 + e^z) - y z, computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (_sigmoid(z) - y) / len(y)
    dh = np.outer(dz, params.W2) * (1.0 - h * h)
    grads = {"W2": h.T @ dz, "b2": float(dz.sum()), "W1": Xs.T @ dh, "b1": dh.sum(axis=0)}
    return loss, grads


def init_mlp(in_dim, keep, dropped, mean, std, hidden, rng):
    n = len(keep)
    return MlpParams(in_dim, keep, mean, std,
                     rng.normal(0.0, 1.0 / math.sqrt(max(n, 1)), (n, hidden)), np.zeros(hidden),
                     rng.normal(0.0, 1.0 / math.sqrt(hidden), hidden), 0.0, "tanh", dropped)


def _copy(params):
    return MlpParams(params.in_dim, list(params.keep), params.mean.copy(), params.std.copy(),
                     params.W1.copy(), params.b1.copy(), params.W2.copy(), params.b2,
                     params.activation, list(params.dropped))


def _f1(y, p, thr):
    y = np.asarray(y).astype(bool)
    if not y.any():
        return 0.0
    return metrics.binary_prf(y, p > thr).f1


def mlp_train(train, val, hyper=MlpHyper(), seed=0):
    """Full-batch gradient descent, keeping the epoch with the best val F1.

    ``train``/``val`` are (X, y) pairs. Returns (params, log) where log holds
    per-epoch (loss, val_f1) and the selected epoch; ties keep the earliest.
    """
    X, y = np.asarray(train[0], dtype=np.float64), np.asarray(train[1], dtype=np.float64)
    Xv, yv = np.asarray(val[0], dtype=np.float64), np.asarray(val[1])
    if y.min() == y.max():
        raise ValueError("training labels are degenerate")
    keep, dropped, mean, std = fit_standardizer(X)
    params = init_mlp(X.shape[1], keep, dropped, mean, std, hyper.hidden, np.random.default_rng(seed))
    Xs = standardize(params, X)
    best, best_f1, best_epoch, since = _copy(params), -1.0, 0, 0
    losses, f1s = [], []
    for epoch in range(1, hyper.epochs + 1):
        loss, g = mlp_loss_and_grad(params, Xs, y)
        if not math.isfinite(loss):
            raise MlpDivergedError(f"non-finite loss at epoch {epoch}")
        params.W1 -= hyper.lr * g["W1"]
        params.b1 -= hyper.lr * g["b1"]
        params.W2 -= hyper.lr * g["W2"]
        params.b2 -= hyper.lr * g["b2"]
        f1 = _f1(yv, mlp_forward(params, Xv), hyper.threshold)
        losses.append(loss)
        f1s.append(f1)
        if f1 > best_f1:
            best, best_f1, best_epoch, since = _copy(params), f1, epoch, 0
        else:
            since += 1
            if since >= hyper.patience:
                break
    return best, {"loss": losses, "val_f1": f1s, "best_epoch": best_epoch, "best_val_f1": best_f1, "seed": seed}


def train_best_of_seeds(train, val, hyper=MlpHyper(), n_seeds=20, seed_offset=0):
    """Train ``n_seeds`` MLPs and keep the best by val F1 (lowest seed on ties)."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    runs = [mlp_train(train, val, hyper, seed_offset + s) for s in range(n_seeds)]
    best = max(range(n_seeds), key=lambda i: (runs[i][1]["best_val_f1"], -i))
    return runs[best][0], runs[best][1], [r[1]["best_val_f1"] for r in runs]


# --- thresholds --------------------------------------------------------------

def tune_threshold(scores, labels):
    """F1-maximising threshold among midpoints of adjacent distinct scores.

    Decisions are ``score > threshold``; ties go to the lower threshold. With a
    single distinct score the only candidate is that score minus one.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("degenerate labels")
    values = np.unique(scores)
    cands = (values[:-1] + values[1:]) / 2 if values.size > 1 else np.array([values[0] - 1.0])
    best_thr, best_f1 = None, -1.0
    for thr in cands:
        f1 = metrics.binary_prf(labels, scores > thr).f1
        if f1 > best_f1:
            best_thr, best_f1 = float(thr), f1
    return best_thr, best_f1


def calibrate_rate(scores, rate):
    """Threshold whose positive count is the largest achievable <= floor(rate * N).

    Decisions are ``score > threshold``; tied scores cannot be separated, so
    the count can fall below the floor.
    """
    if not 0.0 < rate <= 1.0:
        raise ValueError("target rate must be in (0, 1]")
    s = np.sort(np.asarray(scores, dtype=np.float64))[::-1]
    N = s.size
    m = min(N, int(math.floor(rate * N + 1e-9)))
    if m >= N:
        return float(s[-1] - 1.0)
    c = m
    while c > 0 and s[c - 1] == s[c]:
        c -= 1
    return float(s[c])


def ensemble_and(*decisions):
    if len(decisions) < 2:
        raise ValueError("an ensemble needs at least two decision streams")
    out = np.asarray(decisions[0]).astype(bool)
    for d in decisions[1:]:
        out = out & np.asarray(d).astype(bool)
    return out


# --- detectors ---------------------------------------------------------------

@dataclass
class DetectorSpec:
    kind: str
    threshold: float = 0.5
    params: MlpParams = None
    hyper: dict = field(default_factory=dict)
    components: list = field(default_factory=list)
    k: int = 3
    seed: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.kind == "ensemble-and" and len(self.components) < 2:
            raise ValueError("ensemble-and needs at least two components")
        if not math.isfinite(self.threshold) and self.kind != "nmt-score":
            raise ValueError("threshold must be finite")

    @property
    def feature_mode(self):
        return self.kind.split("-")[0] if self.kind.endswith("-mlp") else None

    def to_dict(self):
        return {"format": "hallulrp-detector", "version": FORMAT_VERSION, "kind": self.kind,
                "threshold": self.threshold, "k": self.k, "seed": self.seed, "hyper": self.hyper,
                "params": self.params.to_dict() if self.params is not None else None,
                "components": [c.to_dict() for c in self.components], "info": self.info}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "hallulrp-detector" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a detector file of a supported version")
        return cls(d["kind"], d["threshold"], MlpParams.from_dict(d["params"]) if d["params"] else None,
                   d.get("hyper", {}), [cls.from_dict(c) for c in d.get("components", [])],
                   d.get("k", 3), d.get("seed", 0), d.get("info", {}))


def save_detector(spec, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def load_detector(path):
    with open(path, encoding="utf-8") as f:
        return DetectorSpec.from_dict(json.load(f))


def degeneration_scores(samples):
    return np.array([metrics.repetition_count(s["out"]) - metrics.repetition_count(s["src"]) for s in samples],
                    dtype=np.float64)


def score(spec, samples):
    """Scores for scoring detectors, else None."""
    if spec.kind.endswith("-mlp"):
        X = np.array([s["features"][spec.feature_mode] for s in samples], dtype=np.float64)
        return mlp_forward(spec.params, X)
    if spec.kind == "random":
        return np.random.default_rng(spec.seed).random(len(samples))
    if spec.kind == "nmt-score":
        return -np.array([s["nmt_score"] for s in samples], dtype=np.float64)
    if spec.kind == "degeneration":
        return degeneration_scores(samples)
    return None


def decide(spec, samples):
    if spec.kind == "ensemble-and":
        return ensemble_and(*[decide(c, samples) for c in spec.components])
    s = score(spec, samples)
    if spec.kind == "degeneration":
        return s >= spec.k
    if spec.kind == "nmt-score":
        # hallucination iff log-probability < threshold, i.e. -logprob > -threshold
        return s > -spec.threshold
    return s > spec.threshold


def detect_random(n, seed):
    return np.random.default_rng(seed).random(n) > 0.5


def detect_score(nmt_scores, threshold):
    return np.asarray(nmt_scores, dtype=np.float64) < threshold


def tune_degeneration_k(samples, k_grid=range(1, 11)):
    """k maximising F1 on labelled samples (smallest k on ties)."""
    labels = np.array([s["label"] for s in samples], dtype=bool)
    d = degeneration_scores(samples)
    best = max(k_grid, key=lambda k: (metrics.binary_prf(labels, d >= k).f1, -k))
    return int(best)


def evaluate(spec, samples, top_k=20):
    """Per-sample rows plus aggregate P/R/F1 and, for scoring detectors, AUC."""
    labels = np.array([s["label"] for s in samples], dtype=bool)
    decisions = decide(spec, samples)
    scores = score(spec, samples) if spec.kind != "ensemble-and" else None
    prf = metrics.binary_prf(labels, decisions)
    agg = {"n": int(labels.size), "positives": int(labels.sum()), "predicted_positive": int(decisions.sum()),
           "precision": prf.precision, "recall": prf.recall, "f1": prf.f1,
           "no_predicted_positive": prf.no_predicted_positive}
    if spec.kind in SCORING_KINDS:
        agg["auc"] = metrics.auc(labels, scores)
    if scores is not None and labels.size >= top_k:
        agg[f"precision_at_{top_k}"] = metrics.precision_at_k(labels, scores, top_k)
    rows = [{"id": s.get("id", i), "label": int(labels[i]), "decision": int(decisions[i]),
             "score": None if scores is None else float(scores[i])} for i, s in enumerate(samples)]
    return {"kind": spec.kind, "threshold": spec.threshold, "aggregate": agg, "rows": rows}


def mean_reports(reports):
    """Mean of each numeric aggregate metric over several reports of one kind."""
    keys = [k for k, v in reports[0]["aggregate"].items() if isinstance(v, float) and not isinstance(v, bool)]
    return {k: float(np.mean([r["aggregate"][k] for r in reports])) for k in keys}


def recompute_aggregate(report, top_k=20):
    """Aggregate metrics recomputed from the per-sample rows of a report."""
    labels = np.array([r["label"] for r in report["rows"]], dtype=bool)
    dec = np.array([r["decision"] for r in report["rows"]], dtype=bool)
    prf = metrics.binary_prf(labels, dec)
    out = {"precision": prf.precision, "recall": prf.recall, "f1": prf.f1}
    if report["rows"] and report["rows"][0]["score"] is not None:
        sc = np.array([r["score"] for r in report["rows"]])
        if "auc" in report["aggregate"]:
            out["auc"] = metrics.auc(labels, sc)
        if labels.size >= top_k:
            out[f"precision_at_{top_k}"] = metrics.precision_at_k(labels, sc, top_k)
    return out
