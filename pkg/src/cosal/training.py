"""Training loop, loss log and held-out evaluation helpers.

Every iteration draws its own generator from ``(seed, iteration)``, so a run
resumed from a checkpoint replays exactly the draws an uninterrupted run
would have made.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import augment as augment_sample
from .metrics import evaluate_dataset
from .network import CoSaliencyNet

log = logging.getLogger(__name__)

LOG_FIELDS = ("iteration", "decoder", "rpn", "rfm", "total")
ITERATION_KEY = "__iteration__"


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)     # (iteration, decoder, rpn, rfm, total)
    stats: dict = field(default_factory=dict)
    seconds: float = 0.0

    def totals(self):
        return np.array([r[4] for r in self.rows])


def learning_rate(optim, iteration):
    if iteration > optim.lr_drop_at:
        return optim.lr_low
    if optim.warmup and iteration < optim.warmup:
        return optim.lr * iteration / optim.warmup
    return optim.lr


def iteration_rng(seed, iteration):
    return np.random.default_rng([seed, iteration])


def train(net: CoSaliencyNet, samples, run, start=0, iterations=None, on_checkpoint=None, on_row=None):
    """Run iterations ``start + 1 .. iterations`` (1-based) of single-image SGD."""
    if not samples:
        raise ValueError("train: empty training set")
    total_its = run.optim.iterations if iterations is None else iterations
    result = TrainResult(stats={"no_triplet_steps": 0})
    t0 = time.perf_counter()
    for it in range(start + 1, total_its + 1):
        rng = iteration_rng(run.seed, it)
        sample = samples[int(rng.integers(len(samples)))]
        if run.augment:
            sample = augment_sample(sample, rng)
        out = net.train_step(sample, rng, learning_rate(run.optim, it), run.optim.weight_decay,
                             run.mode, run.loss, run.sampling, stats=result.stats,
                             clip_norm=run.optim.clip_norm)
        row = (it, out.decoder, out.rpn, out.rfm, out.total)
        result.rows.append(row)
        if on_row is not None:
            on_row(row)
        if it % 200 == 0:
            log.info("it %d total %.4f (dec %.4f rpn %.4f rfm %.4f)", it, out.total, out.decoder, out.rpn, out.rfm)
        if on_checkpoint is not None and run.checkpoint_every and it % run.checkpoint_every == 0:
            on_checkpoint(it)
    result.seconds = time.perf_counter() - t0
    return result


def moving_average(values, at, window=500):
    """Trailing mean of ``values[:at]`` over at most ``window`` entries (``at`` is 1-based)."""
    values = np.asarray(values, dtype=np.float64)
    lo = max(0, at - window)
    return float(values[lo:at].mean())


def write_log(path, rows, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_FIELDS)
        for it, dec, rpn, rfm, tot in rows:
            w.writerow([it, repr(float(dec)), repr(float(rpn)), repr(float(rfm)), repr(float(tot))])


def read_log(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        return [(int(row[0]), *map(float, row[1:])) for row in r]


def save_training_checkpoint(net, path, iteration):
    net.save(path, extra={ITERATION_KEY: np.array([iteration], dtype=np.float32)})


def predict_all(net, samples):
    return [net.predict(s.image) for s in samples]


def evaluate_model(net, samples):
    return evaluate_dataset(predict_all(net, samples), [s.y for s in samples])
