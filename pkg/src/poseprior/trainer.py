"""Self-supervised reconstruction training of the transformer."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import stt
from .dataset import WindowArrays, motion_inputs
from .motion import MotionPrior

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, params: dict | None = None):
        super().__init__(message)
        self.step = step
        self.params = params


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    warmup_steps: int = 1000
    batch_size: int = 256
    epochs: int = 20
    max_steps: int | None = None
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1 or self.warmup_steps < 0:
            raise ValueError("batch_size and epochs must be positive, warmup_steps non-negative")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def total_steps(self, num_windows: int) -> int:
        per_epoch = -(-num_windows // self.batch_size)
        steps = per_epoch * self.epochs
        return steps if self.max_steps is None else min(steps, self.max_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def normalize_confidence(conf: np.ndarray) -> np.ndarray:
    """Scale confidences so each pose (last axis) sums to 1; all-zero poses stay zero."""
    conf = np.asarray(conf, dtype=np.float64)
    total = conf.sum(axis=-1, keepdims=True)
    return np.divide(conf, total, out=np.zeros_like(conf), where=total > 0)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite value in loss input")


def reconstruction_loss(recon: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    """Confidence-weighted sum of per-joint Euclidean errors over the last three axes' joints."""
    _check_finite(recon, target, weights)
    err = np.sqrt(((recon - target) ** 2).sum(axis=-1))
    return float((weights * err).sum())


def reconstruction_loss_grad(recon, target, weights) -> np.ndarray:
    """d loss / d recon; zero where the residual is exactly zero."""
    r = recon - target
    norm = np.sqrt((r * r).sum(axis=-1, keepdims=True))
    scale = np.divide(weights[..., None], norm, out=np.zeros_like(norm), where=norm > 0)
    return r * scale


def warmup_lr(step: int, config: TrainConfig) -> float:
    """Linear ramp from 0 to the base rate over ``warmup_steps``, constant afterwards."""
    if config.warmup_steps <= 0 or step >= config.warmup_steps:
        return config.learning_rate
    return config.learning_rate * step / config.warmup_steps


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay, applied to matrices only (ndim >= 2)."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p
            if lr:
                p -= (lr * update).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    losses: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def loss_and_grads(params, config: stt.STTConfig, inputs, targets, weights, *, training=True, seed=None, mask=None):
    """Mean-over-windows reconstruction loss and its parameter gradients for one batch."""
    cache: dict = {}
    out = stt.forward(inputs, params, config, training=training, seed=seed, mask=mask, cache=cache)
    n = len(inputs)
    loss = reconstruction_loss(out, targets, weights) / n
    dout = reconstruction_loss_grad(out, targets, weights) / n
    return loss, stt.backward(dout, params, config, cache)


def train(
    windows: WindowArrays,
    prior: MotionPrior | None,
    model_config: stt.STTConfig,
    train_config: TrainConfig,
    *,
    fuse_mode: str = "divide",
    params: dict | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train on ``windows`` to reconstruct the normalized (unscaled) poses from motion-embedded inputs.

    ``prior=None`` trains without motion embedding. Deterministic for a fixed
    ``train_config.seed``: the seed fixes initialization, batch order and masks.
    """
    if len(windows) == 0:
        raise ValueError("no training windows")
    total = train_config.total_steps(len(windows))
    if train_config.warmup_steps > total:
        raise ValueError(f"warmup_steps ({train_config.warmup_steps}) exceeds the step budget ({total})")
    dtype = np.dtype(train_config.dtype)
    inputs, _ = motion_inputs(windows, prior, fuse_mode)
    inputs = inputs.astype(dtype)
    targets = windows.normalized.astype(dtype)
    weights = normalize_confidence(windows.confidences).astype(dtype)

    seed = train_config.seed
    if params is None:
        params = stt.init_params(model_config, seed, dtype=dtype)
    else:
        params = {k: v.astype(dtype, copy=True) for k, v in params.items()}
    opt = AdamW(params, train_config.beta1, train_config.beta2, train_config.adam_eps, train_config.weight_decay)
    order_rng = np.random.default_rng([seed, 1])
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir else None
    result = TrainResult(params=params)
    t0 = time.perf_counter()
    step = 0
    bs = train_config.batch_size
    while step < total:
        perm = order_rng.permutation(len(windows))
        for lo in range(0, len(perm), bs):
            if step >= total:
                break
            idx = np.sort(perm[lo : lo + bs])
            try:
                loss, grads = loss_and_grads(
                    params, model_config, inputs[idx], targets[idx], weights[idx], training=True, seed=[seed, 2, step]
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{exc} at step {step}", step, params) from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at step {step}", step, params)
            opt.step(params, grads, warmup_lr(step, train_config))
            result.losses.append(loss)
            step += 1
            if on_step is not None:
                on_step(step, loss)
            if ckpt_dir and train_config.checkpoint_every and step % train_config.checkpoint_every == 0:
                stt.save_checkpoint(ckpt_dir / f"step_{step:07d}.npz", params, model_config, {"step": step})
    result.steps = step
    result.seconds = time.perf_counter() - t0
    log.info("trained %d steps in %.1fs, final loss %.5f", step, result.seconds, result.losses[-1])
    return result
