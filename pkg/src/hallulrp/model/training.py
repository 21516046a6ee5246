import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from hallulrp.model.transformer import init_weights, loss_and_grad, make_batch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 64
    warmup: int = 400
    lr_factor: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    log_every: int = 100
    # batches are drawn from a random window of this many length-sorted
    # examples (in units of batch_size); 0 samples uniformly from the corpus
    bucket_factor: int = 8

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    weights: object
    losses: list = field(default_factory=list)

    @property
    def initial_loss(self):
        return self.losses[0] if self.losses else float("nan")


def noam_lr(step, d_model, warmup, factor):
    """Inverse-square-root schedule with linear warmup (step counts from 1)."""
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def train_toy(corpus, cfg, hyper=None, seed=0, vocab=None):
    """Train on (source ids, target ids) pairs with Adam and label smoothing.

    Batches are sampled with replacement from a generator seeded by ``seed``;
    the same seed gives bit-identical weights on one machine. With
    ``bucket_factor`` > 0 each batch comes from a window of similar-length
    examples, which cuts padding roughly in half on the toy task.
    """
    hyper = hyper or TrainConfig()
    if not corpus:
        raise ValueError("corpus is empty")
    init_seq, batch_seq = np.random.SeedSequence(seed).spawn(2)
    w = init_weights(cfg, seed=np.random.default_rng(init_seq), vocab=vocab)
    rng = np.random.default_rng(batch_seq)
    m = {k: np.zeros_like(v) for k, v in w.params.items()}
    v2 = {k: np.zeros_like(v) for k, v in w.params.items()}
    losses = []
    order = np.argsort([len(s) + len(t) for s, t in corpus], kind="stable")
    window = min(len(corpus), hyper.bucket_factor * hyper.batch_size)
    for step in range(1, hyper.steps + 1):
        if hyper.bucket_factor > 0:
            start = rng.integers(0, len(corpus) - window + 1)
            idx = order[start + rng.integers(0, window, hyper.batch_size)]
        else:
            idx = rng.integers(0, len(corpus), hyper.batch_size)
        batch = make_batch([corpus[i] for i in idx])
        loss, grads = loss_and_grad(w, *batch)
        if not np.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        losses.append(loss)
        lr = noam_lr(step, cfg.d_model, hyper.warmup, hyper.lr_factor)
        bc1 = 1 - hyper.beta1 ** step
        bc2 = 1 - hyper.beta2 ** step
        for k, g in grads.items():
            m[k] = hyper.beta1 * m[k] + (1 - hyper.beta1) * g
            v2[k] = hyper.beta2 * v2[k] + (1 - hyper.beta2) * g * g
            w.params[k] -= lr * (m[k] / bc1) / (np.sqrt(v2[k] / bc2) + hyper.adam_eps)
        if hyper.log_every and step % hyper.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, loss, lr)
    return TrainResult(w, losses)
