import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import best_threshold_oracle, prf_oracle

from hallulrp import detector as det
from hallulrp import metrics


def separable(n=120, seed=0, dim=9):
    """Staticity-like features: positives in [0.8, 1], negatives in [0.2, 0.6]."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.uniform(0.5, 1.5, (n, dim))
    X[:, -3:] = np.where(y[:, None] == 1, rng.uniform(0.8, 1.0, (n, 3)), rng.uniform(0.2, 0.6, (n, 3)))
    return X, y.astype(float)


def fixed_params(W1, b1, W2, b2):
    d = np.asarray(W1).shape[0]
    return det.MlpParams(d, list(range(d)), np.zeros(d), np.ones(d), np.asarray(W1, float), np.asarray(b1, float),
                         np.asarray(W2, float), float(b2))


def test_forward_zero_weights_gives_half():
    p = fixed_params(np.zeros((3, 2)), np.zeros(2), np.zeros(2), 0.0)
    assert det.mlp_forward(p, [1.0, -2.0, 5.0]) == 0.5


def test_forward_matches_hand_computed_2_2_1_network():
    p = fixed_params([[1.0, -1.0], [0.5, 2.0]], [0.1, -0.2], [1.5, -0.5], 0.3)
    x = [0.4, -0.7]
    h1 = math.tanh(0.4 * 1.0 + -0.7 * 0.5 + 0.1)
    h2 = math.tanh(0.4 * -1.0 + -0.7 * 2.0 - 0.2)
    expected = 1.0 / (1.0 + math.exp(-(1.5 * h1 - 0.5 * h2 + 0.3)))
    assert det.mlp_forward(p, x) == pytest.approx(expected, abs=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.integers(0, 1000))
def test_forward_strictly_inside_unit_interval(x, seed):
    rng = np.random.default_rng(seed)
    p = fixed_params(rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4), rng.normal())
    assert 0.0 < det.mlp_forward(p, x) < 1.0


def test_forward_rejects_dimension_mismatch():
    p = fixed_params(np.zeros((3, 2)), np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError, match="input dimension"):
        det.mlp_forward(p, [1.0, 2.0])


def test_loss_gradient_matches_finite_differences():
    X, y = separable(30, seed=1)
    keep, dropped, mean, std = det.fit_standardizer(X)
    params = det.init_mlp(X.shape[1], keep, dropped, mean, std, 16, np.random.default_rng(0))
    Xs = det.standardize(params, X)
    _, g = det.mlp_loss_and_grad(params, Xs, y)
    rng = np.random.default_rng(2)
    h = 1e-6
    for _ in range(20):
        name = ["W1", "b1", "W2", "b2"][rng.integers(4)]
        if name == "b2":
            orig = params.b2
            params.b2 = orig + h
            up, _ = det.mlp_loss_and_grad(params, Xs, y)
            params.b2 = orig - h
            down, _ = det.mlp_loss_and_grad(params, Xs, y)
            params.b2 = orig
            analytic = g["b2"]
        else:
            arr = getattr(params, name)
            idx = tuple(rng.integers(s) for s in arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            up, _ = det.mlp_loss_and_grad(params, Xs, y)
            arr[idx] = orig - h
            down, _ = det.mlp_loss_and_grad(params, Xs, y)
            arr[idx] = orig
            analytic = g[name][idx]
        fd = (up - down) / (2 * h)
        assert abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8) < 1e-4


def test_training_separable_data_and_determinism():
    train, val = separable(120, 0), separable(60, 1)
    hyper = det.MlpHyper(epochs=300, patience=100)
    p1, log1 = det.mlp_train(train, val, hyper, seed=3)
    p2, _ = det.mlp_train(train, val, hyper, seed=3)
    np.testing.assert_array_equal(p1.W1, p2.W1)
    assert metrics.binary_prf(train[1].astype(bool), det.mlp_forward(p1, train[0]) > 0.5).f1 == 1.0
    assert log1["best_val_f1"] == 1.0
    assert p1.n_params == 9 * 16 + 16 + 16 + 1 < 400


def test_zero_variance_dimensions_are_dropped():
    X, y = separable(40)
    X[:, 2] = 7.0
    p, _ = det.mlp_train((X, y), (X, y), det.MlpHyper(epochs=5), seed=0)
    assert p.dropped == [2] and 2 not in p.keep
    with pytest.raises(ValueError, match="degenerate"):
        det.mlp_train((X, np.zeros(len(y))), (X, y))


def test_best_of_seeds_matches_enumeration():
    train, val = separable(60, 2), separable(40, 3)
    val[0][:5, -3:] = 0.7  # make seeds disagree a little
    hyper = det.MlpHyper(epochs=40, patience=10)
    best, log, f1s = det.train_best_of_seeds(train, val, hyper, n_seeds=3, seed_offset=10)
    runs = [det.mlp_train(train, val, hyper, 10 + s) for s in range(3)]
    assert f1s == [r[1]["best_val_f1"] for r in runs]
    i = max(range(3), key=lambda k: (f1s[k], -k))
    np.testing.assert_array_equal(best.W1, runs[i][0].W1)
    assert log["best_val_f1"] >= max(f1s)
    single, _, _ = det.train_best_of_seeds(train, val, hyper, n_seeds=1, seed_offset=10)
    np.testing.assert_array_equal(single.W1, runs[0][0].W1)


def test_random_detector_rate_and_determinism():
    d = det.detect_random(10_000, seed=5)
    assert abs(d.mean() - 0.5) < 0.02
    np.testing.assert_array_equal(d, det.detect_random(10_000, seed=5))
    spec = det.DetectorSpec("random", seed=5)
    samples = [{"label": i % 3 == 0} for i in range(200)]
    flipped = [{"label": not s["label"]} for s in samples]
    np.testing.assert_array_equal(det.decide(spec, samples), det.decide(spec, flipped))


def test_score_detector_thresholds():
    scores = np.array([-2.0, -0.5, -1.0])
    assert not det.detect_score(scores, -np.inf).any()
    assert det.detect_score(scores, np.inf).all()
    eps = 1e-9
    for s in scores:
        assert det.detect_score([s], s + eps)[0] and not det.detect_score([s], s - eps)[0]
    spec = det.DetectorSpec("nmt-score", threshold=-0.75)
    samples = [{"nmt_score": s} for s in scores]
    np.testing.assert_array_equal(det.decide(spec, samples), det.detect_score(scores, -0.75))


def test_degeneration_detector_and_k_tuning():
    loop = "ba ba ba ba ba ba".split()
    samples = [{"src": ["a", "b"], "out": loop, "label": True}, {"src": ["a"], "out": ["x", "y"], "label": False}]
    spec = det.DetectorSpec("degeneration", k=3)
    assert list(det.decide(spec, samples)) == [True, False]
    assert det.tune_degeneration_k(samples, range(1, 5)) == 1
    rep = det.evaluate(spec, samples)
    assert "auc" not in rep["aggregate"]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), min_size=2, max_size=8))
def test_tune_threshold_matches_exhaustive_sweep(data):
    scores = [float(s) for s, _ in data]
    labels = [y for _, y in data]
    if all(labels) or not any(labels):
        with pytest.raises(ValueError):
            det.tune_threshold(scores, labels)
        return
    thr, f1 = det.tune_threshold(scores, labels)
    o_thr, o_f1 = best_threshold_oracle(scores, labels)
    assert thr == o_thr and f1 == pytest.approx(o_f1)


def test_tune_threshold_separated_scores():
    thr, f1 = det.tune_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert 0.2 < thr < 0.8 and f1 == 1.0


def test_ensemble_and():
    a = np.array([1, 0, 1, 1], bool)
    np.testing.assert_array_equal(det.ensemble_and(a, np.ones(4, bool)), a)
    assert not det.ensemble_and(a, np.zeros(4, bool)).any()
    with pytest.raises(ValueError):
        det.ensemble_and(a)
    # precision of the AND is at least that of either component on this set
    labels = np.array([1, 1, 1, 0, 0, 0, 0, 1], bool)
    c1 = np.array([1, 1, 0, 1, 1, 0, 0, 1], bool)
    c2 = np.array([1, 1, 1, 0, 1, 1, 0, 0], bool)
    both = det.ensemble_and(c1, c2)
    assert set(np.flatnonzero(both)) == set(np.flatnonzero(c1)) & set(np.flatnonzero(c2))
    p = lambda d: metrics.binary_prf(labels, d).precision
    assert p(both) >= max(p(c1), p(c2))


def test_calibrate_rate():
    rng = np.random.default_rng(0)
    s = rng.normal(size=10_000)
    thr = det.calibrate_rate(s, 0.01)
    assert (s > thr).sum() == 100
    assert (s > det.calibrate_rate(s, 1.0)).all()
    counts = [(s > det.calibrate_rate(s, r)).sum() for r in (0.001, 0.01, 0.05, 0.2, 0.5)]
    assert counts == sorted(counts)
    tied = np.array([3.0, 3.0, 3.0, 1.0])
    assert (tied > det.calibrate_rate(tied, 0.5)).sum() == 0
    with pytest.raises(ValueError):
        det.calibrate_rate(s, 0.0)


def test_evaluate_report_round_trip(tmp_path):
    X, y = separable(40, 4)
    params, _ = det.mlp_train((X, y), (X, y), det.MlpHyper(epochs=30), seed=0)
    spec = det.DetectorSpec("lrp-mlp", 0.5, params)
    det.save_detector(spec, tmp_path / "d.json")
    back = det.load_detector(tmp_path / "d.json")
    samples = [{"id": str(i), "label": bool(y[i]), "features": {"lrp": X[i].tolist()}} for i in range(40)]
    rep = det.evaluate(back, samples, top_k=10)
    again = det.recompute_aggregate(rep, top_k=10)
    for k, v in again.items():
        assert rep["aggregate"][k] == pytest.approx(v)
    labels = [s["label"] for s in samples]
    decisions = [r["decision"] for r in rep["rows"]]
    assert rep["aggregate"]["f1"] == pytest.approx(prf_oracle(labels, decisions)[2])
    assert rep == det.evaluate(spec, samples, top_k=10)


def test_random_auc_is_chance_over_seeds():
    rng = np.random.default_rng(0)
    samples = [{"label": bool(v)} for v in rng.random(400) < 0.5]
    aucs = [det.evaluate(det.DetectorSpec("random", seed=s), samples)["aggregate"]["auc"] for s in range(20)]
    assert abs(np.mean(aucs) - 0.5) < 0.03


def test_mean_reports_matches_manual_average():
    reps = [{"aggregate": {"f1": f, "auc": a, "n": 10}} for f, a in [(0.5, 0.6), (0.7, 0.9), (0.6, 0.75)]]
    m = det.mean_reports(reps)
    assert m["f1"] == pytest.approx(0.6) and m["auc"] == pytest.approx(0.75) and "n" not in m


def test_spec_validation():
    with pytest.raises(ValueError):
        det.DetectorSpec("bogus")
    with pytest.raises(ValueError):
        det.DetectorSpec("ensemble-and", components=[det.DetectorSpec("random")])
    with pytest.raises(ValueError):
        det.DetectorSpec("random", threshold=math.nan)
    with pytest.raises(ValueError, match="supported"):
        det.DetectorSpec.from_dict({"format": "other"})

