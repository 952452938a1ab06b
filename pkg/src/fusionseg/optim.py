"""Loss, weight decay, momentum SGD, learning-rate schedule and initialisation.

Random numbers come from numpy's Philox4x64 counter-based bit generator
(``make_rng``); worker streams are derived with ``SeedSequence.spawn``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllPixelsIgnored, EpochOutOfRange, LabelOutOfRange, ShapeMismatch
from .layers import log_softmax_channels, softmax_channels
from .tensor import load_tensor, save_tensor

IGNORE_LABEL = 255


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def spawn_rngs(seed, n):
    """Independent per-worker generators: child i uses SeedSequence(seed).spawn(n)[i]."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def cross_entropy_loss(logits, labels, ignore_label=IGNORE_LABEL, reduction="sum"):
    """Softmax cross entropy over the channel axis.

    Returns ``(loss, grad_logits)``.  ``labels`` has shape (N, H, W).  With
    ``reduction="sum"`` the loss is summed over labelled pixels; "mean"
    divides loss and gradient by their count.
    """
    N, k, H, W = logits.shape
    if labels.shape != (N, H, W):
        raise ShapeMismatch(f"labels {labels.shape} do not match logits {logits.shape}")
    labels = np.asarray(labels).astype(np.int64)
    valid = labels != ignore_label
    if not valid.any():
        raise AllPixelsIgnored("every pixel carries the ignore label")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise LabelOutOfRange(f"labels must lie in 0..{k - 1} or equal {ignore_label}")
    safe = np.where(valid, labels, 0)
    logp = log_softmax_channels(logits)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -float(picked[valid].sum(dtype=np.float64))
    grad = softmax_channels(logits)
    onehot_sub = np.zeros_like(grad)
    np.put_along_axis(onehot_sub, safe[:, None], 1.0, axis=1)
    grad -= onehot_sub
    grad *= valid[:, None]
    if reduction == "mean":
        count = int(valid.sum())
        loss /= count
        grad /= count
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss, grad


def is_decayed(name: str) -> bool:
    """Only convolution filter weights are decayed; biases and BN affine terms are not."""
    return name.endswith("weight")


def l2_penalty(params, weight_decay):
    """lambda * sum(w**2) over decayed weights, and its gradient 2*lambda*w per name."""
    penalty = 0.0
    grads = {}
    for name, w in params.items():
        if not is_decayed(name):
            continue
        if weight_decay:
            penalty += weight_decay * float(np.sum(np.square(w, dtype=np.float64)))
        grads[name] = (2.0 * weight_decay) * w
    return penalty, grads


class SGD:
    """Momentum SGD: v <- -lr * grad + momentum * v;  w <- w + v.

    ``step`` updates parameter arrays in place.  The weight-decay gradient is
    added here, so callers pass the raw data gradient.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=5e-4):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads):
        _, decay = l2_penalty(self.params, self.weight_decay)
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if name in decay and self.weight_decay:
                g = g + decay[name]
            v = self.velocity[name]
            v *= p.dtype.type(self.momentum)
            v -= p.dtype.type(self.lr) * g.astype(p.dtype, copy=False)
            p += v

    def state_dict(self):
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}

    def save(self, directory, epoch):
        directory = Path(directory)
        for name, v in self.velocity.items():
            save_tensor(directory / "velocity" / name, v)
        meta = {"epoch": epoch, **self.state_dict()}
        (directory / "optimizer.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def load(self, directory):
        directory = Path(directory)
        meta = json.loads((directory / "optimizer.json").read_text())
        self.lr, self.momentum, self.weight_decay = meta["lr"], meta["momentum"], meta["weight_decay"]
        for name in self.velocity:
            self.velocity[name][...] = load_tensor(directory / "velocity" / name)
        return meta["epoch"]


@dataclass(frozen=True)
class LRSchedule:
    eta_start: float = 1e-6
    eta_end: float = 1e-7
    num_epochs: int = 50


def lr_at_epoch(schedule: LRSchedule, t) -> float:
    """Geometric interpolation between eta_start (t=0) and eta_end (t=num_epochs-1)."""
    E = schedule.num_epochs
    if not 0 <= t <= E - 1:
        raise EpochOutOfRange(f"epoch {t} outside 0..{E - 1}")
    if E == 1:
        return schedule.eta_start
    if t == E - 1:
        return schedule.eta_end
    frac = t / (E - 1)
    log_eta = math.log10(schedule.eta_start) + frac * (math.log10(schedule.eta_end) - math.log10(schedule.eta_start))
    return 10.0 ** log_eta


def xavier_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape, fan_in, fan_out, rng, dtype=np.float32):
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    b = xavier_bound(fan_in, fan_out)
    return rng.uniform(-b, b, size=shape).astype(dtype)
