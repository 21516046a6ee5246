import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hallulrp.model import ModelConfig, init_weights

SMOKE_CONFIG = Path(__file__).with_name("smoke.yaml")

# stages compared for determinism, in order
PIPELINE = ["train-model", "generate-data", "contributions", "train-detector", "eval"]


def run_cli(*args, check=True):
    proc = subprocess.run([sys.executable, "-m", "hallulrp.cli", *map(str, args)], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"hallulrp {' '.join(map(str, args))} exited {proc.returncode}:\n{proc.stderr}")
    return proc


def run_pipeline(out, config=None, extra=()):
    """Run the end-to-end pipeline in fresh processes; returns wall time."""
    start = time.perf_counter()
    cfg = ["--config", config] if config else []
    for cmd in PIPELINE:
        run_cli(cmd, "--out", out, *cfg, *extra)
    return time.perf_counter() - start


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """One full pipeline run with the packaged default config (several minutes)."""
    out = tmp_path_factory.mktemp("run1")
    elapsed = run_pipeline(out)
    run_cli("analyze", "--out", out)
    return out, elapsed


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    run_pipeline(out, SMOKE_CONFIG)
    run_cli("analyze", "--out", out, "--config", SMOKE_CONFIG)
    return out


@pytest.fixture(scope="session")
def trained_weights(default_run):
    from hallulrp.model import load_weights

    return load_weights(default_run[0] / "model.weights")


def random_model(seed=0, vocab_size=9, n_layers=1, d_model=4, n_heads=2, d_ff=6, scale=0.0):
    """Small untrained model; ``scale`` adds extra noise so biases and gains are non-trivial."""
    cfg = ModelConfig(vocab_size=vocab_size, n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ff=d_ff,
                      max_src_len=12, max_tgt_len=12)
    w = init_weights(cfg, seed=seed)
    if scale:
        rng = np.random.default_rng(seed + 1000)
        for k in w.params:
            w.params[k] = w.params[k] + rng.normal(0.0, scale, w.params[k].shape)
    return w


# criterion number -> (status, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {detail}")
