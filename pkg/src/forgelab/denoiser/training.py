"""Momentum-SGD training of the tiny predictor on the denoising objective."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..core import RngStream
from ..diffusion import NoiseSchedule
from .network import NetworkPredictor, offset_gain

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    iterations: int = 3000
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    # multiplier for the image-space offset map; its gradient is spread over
    # H*W*C entries, so without it the map trains ~1000x slower than the convs
    posmap_lr_scale: Optional[float] = None
    # the input skip and the scaled head are amplified by up to
    # r = 1/sqrt(1 - abar_1) ~ 23, so their curvature is far above the trunk's.
    # The head sees O(1) features and needs ~1/r^2; the skip only sees the
    # small high-pass part of x_t
    skip_lr_scale: float = 0.1
    head_lr_scale: float = 0.002
    # weights handed back are an exponential moving average of the iterates;
    # 0 returns the last iterate
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size <= 0 or self.learning_rate < 0:
            raise ValueError("iterations, batch_size and learning_rate must be non-negative / positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


def sample_batch(corpus: np.ndarray, schedule: NoiseSchedule, batch_size: int,
                 rng: np.random.Generator):
    """Draw (x_t, base indices, offset gains, eps) with uniform sampler steps t in 1..T."""
    idx = rng.integers(0, len(corpus), size=batch_size)
    t = rng.integers(1, schedule.T + 1, size=batch_size)
    eps = rng.standard_normal((batch_size,) + corpus.shape[1:])
    a = schedule.alpha_bar[t][:, None, None, None]
    xt = np.sqrt(a) * corpus[idx] + np.sqrt(1.0 - a) * eps
    return xt, schedule.timestep_map[t - 1], offset_gain(schedule.alpha_bar[t]), eps


def train(predictor: NetworkPredictor, corpus: Sequence[np.ndarray], schedule: NoiseSchedule,
          cfg: TrainingConfig, log_every: int = 0, trace_path: Optional[str] = None):
    """Train in place; returns ``(predictor, loss_trace)``.

    The loss trace records the raw iterates; the predictor ends up holding the
    averaged weights.
    """
    data = np.asarray(corpus, dtype=np.float64)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("corpus must be a non-empty list of (H, W, C) images")
    net = predictor.net
    if data.shape[1:] != (net.image_size, net.image_size, net.channels):
        raise ValueError(f"corpus images {data.shape[1:]} do not match the network input")
    rng = RngStream(cfg.seed).child("train").generator()
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    lr = {k: cfg.learning_rate for k in net.params}
    lr["posmap"] *= cfg.posmap_lr_scale if cfg.posmap_lr_scale is not None else net.params["posmap"].size
    lr["skip"] *= cfg.skip_lr_scale
    lr["head"] *= cfg.head_lr_scale
    ema = {k: v.astype(np.float64) for k, v in net.params.items()}
    trace = []
    for it in range(cfg.iterations):
        xt, b, g, eps = sample_batch(data, schedule, cfg.batch_size, rng)
        loss, grads = net.loss_and_grads(xt, b, g, eps)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became non-finite at iteration {it}")
        for k, g in grads.items():
            v = velocity[k]
            v *= cfg.momentum
            v -= lr[k] * g
            net.params[k] += v
            ema[k] += (1.0 - cfg.ema_decay) * (net.params[k] - ema[k])
        trace.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("iter %d loss %.5f (avg100 %.5f)", it + 1, loss, np.mean(trace[-100:]))
    for k in net.params:
        net.params[k] = ema[k].astype(net.dtype)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return predictor, trace


def write_trace(trace: Sequence[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(loss))])


def evaluate_loss(predictor: NetworkPredictor, corpus, schedule: NoiseSchedule, n_batches: int,
                  batch_size: int, stream: RngStream) -> float:
    """Monte Carlo estimate of the denoising loss on fresh (t, eps) draws."""
    data = np.asarray(corpus, dtype=np.float64)
    rng = stream.generator()
    losses = []
    for _ in range(n_batches):
        xt, b, g, eps = sample_batch(data, schedule, batch_size, rng)
        out = predictor.net.forward(xt, b, g).astype(np.float64)
        losses.append(np.mean((out - eps) ** 2))
    return float(np.mean(losses))
