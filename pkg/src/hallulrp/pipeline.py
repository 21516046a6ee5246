"""Pipeline stages behind the command-line interface.

Each stage reads and writes files under one working directory and returns
the list of paths it produced. Outputs contain no timestamps, so re-running a
stage with the same configuration reproduces them byte for byte.
"""
import csv
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np

from hallulrp import __version__, _kernels, detector as det, features as feat, lrp, metrics
from hallulrp.model import (
    EOS,
    ModelConfig,
    TrainConfig,
    Vocabulary,
    detokenize,
    greedy_decode_batch,
    load_weights,
    save_weights,
    tokenize,
    train_toy,
)
from hallulrp.model.io import FORMAT_VERSION as WEIGHTS_VERSION
from hallulrp.perturb import (
    HALLUCINATED,
    ContrastivePair,
    Translator,
    count_split,
    generate_dataset,
    read_pairs,
    write_pairs,
)
from hallulrp.toydata import ToyLanguage, read_corpus, write_corpus

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MODES = ("lrp", "attention")


class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts):
        return self.root.joinpath(*parts)

    corpus = property(lambda self: self.path("corpus.tsv"))
    weights = property(lambda self: self.path("model.weights"))
    train_log = property(lambda self: self.path("train_log.json"))

    def split(self, name):
        return self.path("data", f"{name}.jsonl")

    def contrib(self, split, what):
        return self.path("contrib", f"{split}.{what}")

    def detector(self, name):
        return self.path("detectors", f"{name}.json")


def dump_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(ws, cfg, command, inputs, outputs):
    rel = lambda p: str(Path(p).relative_to(ws.root)) if Path(p).is_relative_to(ws.root) else str(p)
    manifest = {
        "command": command,
        "config_hash": cfg.hash(),
        "master_seed": cfg.seed,
        "versions": {"hallulrp": __version__, "weights_format": WEIGHTS_VERSION, "numpy": np.__version__,
                     "kernel_backend": _kernels.backend()},
        "inputs": {rel(p): sha256(p) for p in inputs if Path(p).exists()},
        "outputs": {rel(p): sha256(p) for p in outputs},
    }
    return dump_json(manifest, ws.path("manifests", f"{command}.json"))


# --- corpus and model --------------------------------------------------------

def make_corpus(ws, cfg):
    lang = ToyLanguage(cfg.toy)
    pairs = lang.corpus(cfg.corpus.size, cfg.stage_seed("corpus"))
    ws.root.mkdir(parents=True, exist_ok=True)
    write_corpus(pairs, ws.corpus)
    return [ws.corpus]


def model_config(cfg, vocab_size):
    return ModelConfig(vocab_size=vocab_size, **cfg.model.__dict__)


def train_model(ws, cfg):
    made = [] if ws.corpus.exists() else make_corpus(ws, cfg)
    pairs = read_corpus(ws.corpus)
    if not pairs:
        raise ValueError("corpus is empty")
    vocab = Vocabulary.build(pairs, cfg.corpus.vocab_min_count, cfg.corpus.vocab_max_size)
    data = [(tokenize(s, vocab), tokenize(t, vocab)) for s, t in pairs]
    mcfg = model_config(cfg, len(vocab))
    res = train_toy(data, mcfg, cfg.train, seed=cfg.stage_seed("train"), vocab=vocab)
    save_weights(res.weights, ws.weights)
    acc = heldout_accuracy(res.weights, cfg)
    log.info("held-out sequence accuracy %.3f", acc)
    dump_json({"losses": res.losses, "initial_loss": res.losses[0] if res.losses else None,
               "final_loss": res.losses[-1] if res.losses else None, "heldout_accuracy": acc, "vocab_size": len(vocab), "model": mcfg.to_dict(),
               "train": cfg.train.to_dict()}, ws.train_log)
    return made + [ws.weights, ws.train_log]


def heldout_accuracy(w, cfg):
    """Greedy sequence accuracy on fresh clean pairs from the toy task."""
    if cfg.corpus.heldout < 1:
        return None
    test = ToyLanguage(cfg.toy).corpus(cfg.corpus.heldout, cfg.stage_seed("heldout"), noise=False)
    outs = greedy_decode_batch([tokenize(s, w.vocab) for s, _ in test], w)
    return float(np.mean([detokenize(o.body(), w.vocab) == t for (_, t), o in zip(test, outs)]))


# --- contrastive data --------------------------------------------------------

def generate_data(ws, cfg):
    w = load_weights(ws.weights)
    corpus = read_corpus(ws.corpus)
    splits, report, pairs = generate_dataset(w, corpus, cfg.gen_config())
    out = []
    for name in SPLITS:
        write_pairs(splits[name], ws.split(name))
        out.append(ws.split(name))
    write_pairs(pairs, ws.path("data", "pairs.jsonl"))
    report["master_seed"] = cfg.seed
    out += [ws.path("data", "pairs.jsonl"), dump_json(report, ws.path("data", "report.json"))]
    return out


# --- contributions and features ----------------------------------------------

def _side_tokens(pair, side, vocab):
    src, out, eos = ((pair.pert_src, pair.pert_out, pair.pert_eos) if side == "pert"
                     else (pair.src, pair.orig_out, pair.orig_eos))
    return tokenize(src, vocab), tokenize(out, vocab) + ([EOS] if eos else [])


def contribution(w, src_ids, out_ids, mode, cfg):
    if mode == "lrp":
        return lrp.token_contributions(src_ids, out_ids, w, cfg.lrp)
    if mode == "attention":
        return lrp.attention_contributions(src_ids, out_ids, w)
    raise ValueError(f"unknown contribution mode {mode!r}")


def sample_metrics(R, cfg):
    fc = cfg.features
    rbar = feat.normalized_source_contribution(R)
    ks = feat.valid_windows(R.T, fc.k_max)
    vec, fallback = (feat.build_feature_vector(R, fc.K1, fc.K2) if R.n >= 2 * fc.K1 and ks else (None, None))
    return {
        "vector": None if vec is None else vec.tolist(),
        "fallback_k": fallback,
        "max_staticity": feat.max_staticity(R, fc.k_max) if ks else None,
        "high_ratio": {repr(l): feat.high_contribution_ratio(rbar, l) for l in fc.lambda_grid},
        "eos_share": feat.eos_contribution_share(R),
        "relative_source": feat.relative_source_contribution(R).tolist(),
        "rbar": rbar.tolist(),
    }


def _grid_rows(sample_id, side, R, vocab):
    for t in range(R.T):
        for i in range(R.n):
            tok = vocab.token(R.src_tokens[i]) if i < len(R.src_tokens) else "</s>"
            yield [sample_id, side, t, i, tok, repr(float(R.source[t, i]))]


def contributions(ws, cfg, inputs=None, modes=MODES):
    """Relevance exports, heatmap grids and feature records per input split.

    The perturbed side of every pair is processed; the original side only for
    hallucinated pairs (it is needed for the contrastive analysis).
    """
    w = load_weights(ws.weights)
    inputs = inputs or {name: ws.split(name) for name in SPLITS if ws.split(name).exists()}
    out = []
    for name, path in inputs.items():
        pairs = read_pairs(path)
        feats, rel = [], {m: [] for m in modes}
        grids = {m: io.StringIO(newline="") for m in modes}
        writers = {m: csv.writer(grids[m], lineterminator="\n") for m in modes}
        for m in modes:
            writers[m].writerow(["id", "side", "step", "pos", "token", "value"])
        for k, p in enumerate(pairs):
            sides = ("pert", "orig") if p.label == HALLUCINATED else ("pert",)
            for side in sides:
                src_ids, out_ids = _side_tokens(p, side, w.vocab)
                rec = {"id": p.id, "seed_id": p.seed_id, "side": side, "label": p.label == HALLUCINATED,
                       "kind": p.kind, "insert_class": p.insert_class, "degenerated": p.degenerated,
                       "src": (p.pert_src if side == "pert" else p.src).split(),
                       "out": (p.pert_out if side == "pert" else p.orig_out).split(),
                       "nmt_score": p.pert_score if side == "pert" else p.orig_score,
                       "features": {}, "metrics": {}}
                if not out_ids or not src_ids:
                    rec["skipped"] = "empty sequence"
                    feats.append(rec)
                    continue
                for m in modes:
                    R = contribution(w, src_ids, out_ids, m, cfg)
                    mt = sample_metrics(R, cfg)
                    rec["features"][m] = mt.pop("vector")
                    rec["metrics"][m] = mt
                    for r in lrp.to_records(R, p.id):
                        r["side"] = side
                        rel[m].append(r)
                    for row in _grid_rows(p.id, side, R, w.vocab):
                        writers[m].writerow(row)
                feats.append(rec)
            if (k + 1) % 200 == 0:
                log.info("%s: %d/%d pairs", name, k + 1, len(pairs))
        ws.path("contrib").mkdir(parents=True, exist_ok=True)
        fpath = ws.contrib(name, "features.jsonl")
        fpath.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in feats), encoding="utf-8")
        out.append(fpath)
        for m in modes:
            rp = ws.contrib(name, f"{m}.relevance.jsonl")
            rp.write_text(lrp.dumps_records(rel[m]), encoding="utf-8")
            gp = ws.contrib(name, f"{m}.grid.csv")
            gp.write_text(grids[m].getvalue(), encoding="utf-8")
            out += [rp, gp]
    return out


def read_features(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def read_grid(path):
    """Re-import a heatmap grid as {(id, side): (T, n) array}."""
    cells = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            cells.setdefault((row["id"], row["side"]), []).append(
                (int(row["step"]), int(row["pos"]), float(row["value"])))
    grids = {}
    for key, entries in cells.items():
        T = max(e[0] for e in entries) + 1
        n = max(e[1] for e in entries) + 1
        g = np.zeros((T, n))
        for t, i, v in entries:
            g[t, i] = v
        grids[key] = g
    return grids


def detector_samples(records, mode_required=True):
    """Perturbed-side records usable by every detector."""
    out = []
    for r in records:
        if r["side"] != "pert" or r.get("skipped"):
            continue
        if mode_required and any(r["features"].get(m) is None for m in MODES):
            continue
        out.append(r)
    return out


# --- analysis ----------------------------------------------------------------

def _smd_or_none(h, o):
    try:
        return metrics.standardized_mean_difference(h, o, paired=True)._asdict()
    except ValueError as e:
        return {"error": str(e), "n": len(h)}


def analyze(ws, cfg, splits=SPLITS):
    """Paired SMDs of max-staticity and high-contribution ratio, plus curves."""
    recs = []
    for name in splits:
        p = ws.contrib(name, "features.jsonl")
        if p.exists():
            recs += read_features(p)
    by_id = {}
    for r in recs:
        if r.get("skipped"):
            continue
        by_id.setdefault(r["id"], {})[r["side"]] = r
    pairs = [v for v in by_id.values() if "pert" in v and "orig" in v and v["pert"]["label"]]
    if not pairs:
        raise ValueError("missing pair structure: no hallucinated pair has both sides")
    report = {"n_pairs": len(pairs), "groups": {}, "master_seed": cfg.seed}
    groups = {"all": pairs,
              "degenerated": [p for p in pairs if p["pert"]["degenerated"]],
              "non-degenerated": [p for p in pairs if not p["pert"]["degenerated"]]}
    out = []
    for mode in MODES:
        for gname, group in groups.items():
            usable = [p for p in group if p["pert"]["metrics"][mode]["max_staticity"] is not None
                      and p["orig"]["metrics"][mode]["max_staticity"] is not None]
            h = [p["pert"]["metrics"][mode]["max_staticity"] for p in usable]
            o = [p["orig"]["metrics"][mode]["max_staticity"] for p in usable]
            entry = {"n": len(usable), "max_staticity": _smd_or_none(h, o) if len(usable) >= 2 else None,
                     "high_ratio": {}}
            best = None
            for lam in cfg.features.lambda_grid:
                key = repr(lam)
                hh = [p["pert"]["metrics"][mode]["high_ratio"][key] for p in group]
                oo = [p["orig"]["metrics"][mode]["high_ratio"][key] for p in group]
                s = _smd_or_none(hh, oo) if len(group) >= 2 else None
                entry["high_ratio"][key] = s
                if s and "value" in s and (best is None or abs(s["value"]) > abs(best[1])):
                    best = (lam, s["value"])
            entry["high_ratio_best"] = None if best is None else {"lambda0": best[0], "value": best[1]}
            entry["eos_share"] = {
                "hallucinated": float(np.mean([p["pert"]["metrics"][mode]["eos_share"] for p in group])) if group else None,
                "original": float(np.mean([p["orig"]["metrics"][mode]["eos_share"] for p in group])) if group else None,
            }
            report["groups"][f"{mode}/{gname}"] = entry
        out += _curves(ws, mode, pairs)
    report["signs_match_reference"] = {
        mode: {
            "max_staticity_positive": _sign(report["groups"][f"{mode}/all"]["max_staticity"], 1),
            "high_ratio_negative": _sign(report["groups"][f"{mode}/all"]["high_ratio_best"], -1),
        } for mode in MODES}
    out.insert(0, dump_json(report, ws.path("analysis", "report.json")))
    return out


def _sign(entry, sign):
    if not entry or "value" not in entry:
        return None
    return bool(np.sign(entry["value"]) == sign)


def _mean_curve(seqs):
    L = max(len(s) for s in seqs)
    rows = []
    for t in range(L):
        vals = [s[t] for s in seqs if len(s) > t]
        rows.append((t, float(np.mean(vals)), len(vals)))
    return rows


def _curves(ws, mode, pairs):
    out = []
    for what, key in (("source_by_step", "relative_source"), ("rbar_by_position", "rbar")):
        buf = io.StringIO(newline="")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["index", "hallucinated_mean", "hallucinated_n", "original_mean", "original_n"])
        h = _mean_curve([p["pert"]["metrics"][mode][key] for p in pairs])
        o = _mean_curve([p["orig"]["metrics"][mode][key] for p in pairs])
        for t in range(max(len(h), len(o))):
            hv = h[t] if t < len(h) else (t, "", 0)
            ov = o[t] if t < len(o) else (t, "", 0)
            wr.writerow([t, repr(hv[1]) if hv[2] else "", hv[2], repr(ov[1]) if ov[2] else "", ov[2]])
        path = ws.path("analysis", f"{mode}.{what}.csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue(), encoding="utf-8")
        out.append(path)
    return out


# --- detectors ---------------------------------------------------------------

def _xy(samples, mode):
    X = np.array([s["features"][mode] for s in samples], dtype=np.float64)
    y = np.array([s["label"] for s in samples], dtype=np.float64)
    return X, y


def train_detectors(ws, cfg):
    train = detector_samples(read_features(ws.contrib("train", "features.jsonl")))
    val = detector_samples(read_features(ws.contrib("val", "features.jsonl")))
    dc = cfg.detector
    hyper = dc.hyper()
    base_seed = cfg.stage_seed("detector")
    out = []
    specs = {}
    for mode in MODES:
        for r in range(dc.runs):
            offset = (base_seed + r * dc.n_seeds) % (2 ** 31)
            params, logd, f1s = det.train_best_of_seeds(_xy(train, mode), _xy(val, mode), hyper, dc.n_seeds, offset)
            spec = det.DetectorSpec(f"{mode}-mlp", hyper.threshold, params, hyper.to_dict(),
                                    info={"run": r, "seed": logd["seed"], "val_f1": logd["best_val_f1"],
                                          "best_epoch": logd["best_epoch"], "seed_val_f1": f1s,
                                          "n_params": params.n_params})
            specs[f"{mode}-mlp.run{r}"] = spec
    labels = np.array([s["label"] for s in val], dtype=bool)
    nmt = -np.array([s["nmt_score"] for s in val])
    thr, f1 = det.tune_threshold(nmt, labels)
    specs["nmt-score"] = det.DetectorSpec("nmt-score", -thr, info={"val_f1": f1})
    k = det.tune_degeneration_k(val, dc.k_grid)
    specs["degeneration"] = det.DetectorSpec("degeneration", 0.5, k=k, info={"k_grid": list(dc.k_grid)})
    rseed = cfg.stage_seed("random")
    for r in range(dc.runs):
        specs[f"random.run{r}"] = det.DetectorSpec("random", 0.5, seed=rseed + r)
    for r in range(dc.runs):
        specs[f"ensemble-lrp-nmt.run{r}"] = det.DetectorSpec(
            "ensemble-and", 0.5, components=[specs[f"lrp-mlp.run{r}"], specs["nmt-score"]])
        specs[f"ensemble-lrp-attention.run{r}"] = det.DetectorSpec(
            "ensemble-and", 0.5, components=[specs[f"lrp-mlp.run{r}"], specs[f"attention-mlp.run{r}"]])
    for name, spec in specs.items():
        path = ws.detector(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        det.save_detector(spec, path)
        out.append(path)
    return out


def detector_files(ws):
    return sorted(ws.path("detectors").glob("*.json"))


def family(path):
    return Path(path).stem.split(".run")[0]


def detect(ws, cfg, detectors=None, input_path=None):
    samples = detector_samples(read_features(input_path or ws.contrib("test", "features.jsonl")))
    out = []
    for path in detectors or detector_files(ws):
        spec = det.load_detector(path)
        dec = det.decide(spec, samples)
        sc = det.score(spec, samples) if spec.kind != "ensemble-and" else None
        lines = [json.dumps({"id": s["id"], "decision": int(d), "score": None if sc is None else float(v)},
                            sort_keys=True)
                 for s, d, v in zip(samples, dec, sc if sc is not None else [None] * len(samples))]
        p = ws.path("detect", f"{Path(path).stem}.jsonl")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        out.append(p)
    return out


def evaluate(ws, cfg, input_path=None, split="test"):
    samples = detector_samples(read_features(input_path or ws.contrib(split, "features.jsonl")))
    fams = {}
    for path in detector_files(ws):
        spec = det.load_detector(path)
        rep = det.evaluate(spec, samples, cfg.eval.top_k)
        rep["detector"] = path.stem
        fams.setdefault(family(path), []).append(rep)
    report = {"split": split, "n": len(samples), "master_seed": cfg.seed, "detectors": {}}
    for name, reps in sorted(fams.items()):
        report["detectors"][name] = {"runs": reps, "mean": det.mean_reports(reps), "n_runs": len(reps)}
    return [dump_json(report, ws.path("eval", "report.json"))]


# --- stress test -------------------------------------------------------------

def stress(ws, cfg, k=None, rate=None, size=None):
    """Score an unlabelled corpus and list top-k candidates per detector."""
    k = cfg.eval.top_k if k is None else k
    rate = cfg.eval.rate if rate is None else rate
    size = cfg.eval.stress_size if size is None else size
    w = load_weights(ws.weights)
    corpus = ToyLanguage(cfg.toy).corpus(size, cfg.stage_seed("stress"))
    translate = Translator(w, cfg.gen.beam, cfg.gen.out_clip)
    samples = []
    for i, (src, _) in enumerate(corpus):
        src_ids = tokenize(src, w.vocab)
        if not src_ids or len(src_ids) + 1 > w.config.max_src_len:
            continue
        out, nmt_score, eos = translate(src)
        out_ids = tokenize(out, w.vocab) + ([EOS] if eos else [])
        if not out_ids:
            continue
        rec = {"id": f"stress-{i}", "src": src.split(), "out": out.split(), "nmt_score": nmt_score, "features": {}}
        ok = True
        for m in MODES:
            R = contribution(w, src_ids, out_ids, m, cfg)
            vec = sample_metrics(R, cfg)["vector"]
            ok &= vec is not None
            rec["features"][m] = vec
        if ok:
            samples.append(rec)
    warnings = []
    if k > len(samples):
        warnings.append(f"k={k} exceeds corpus size {len(samples)}; clamped")
        log.warning(warnings[-1])
        k = len(samples)
    report = {"n": len(samples), "k": k, "rate": rate, "warnings": warnings, "top_k": {}, "master_seed": cfg.seed}
    calibrated = {}
    for path in detector_files(ws):
        spec = det.load_detector(path)
        if spec.kind == "ensemble-and":
            continue
        sc = det.score(spec, samples)
        order = np.argsort(-sc, kind="stable")[:k]
        report["top_k"][path.stem] = [{"id": samples[i]["id"], "score": float(sc[i]),
                                       "src": " ".join(samples[i]["src"]), "out": " ".join(samples[i]["out"])}
                                      for i in order]
        thr = det.calibrate_rate(sc, rate)
        calibrated[path.stem] = sc > thr
    ens = {}
    for path in detector_files(ws):
        spec = det.load_detector(path)
        if spec.kind != "ensemble-and":
            continue
        parts = [n for n in calibrated if n in _component_names(path.stem)]
        if len(parts) < 2:
            continue
        dec = det.ensemble_and(*[calibrated[n] for n in parts])
        ens[path.stem] = {"components": parts, "positives": [samples[i]["id"] for i in np.flatnonzero(dec)],
                          "component_positives": {n: int(calibrated[n].sum()) for n in parts}}
    report["calibrated_ensembles"] = ens
    return [dump_json(report, ws.path("stress", "report.json"))]


def _component_names(stem):
    fam, _, run = stem.partition(".run")
    if fam == "ensemble-lrp-nmt":
        return {f"lrp-mlp.run{run}", "nmt-score"}
    if fam == "ensemble-lrp-attention":
        return {f"lrp-mlp.run{run}", f"attention-mlp.run{run}"}
    return set()
