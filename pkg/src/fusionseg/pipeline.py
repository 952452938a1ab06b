"""Training loop, full-tile inference and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import NormStats, compute_stats, load_scene, normalize, normalize_scene, sample_patches
from .errors import NonFiniteError
from .metrics import ConfusionMatrix
from .models import Network, build_network, save_checkpoint
from .optim import IGNORE_LABEL, SGD, LRSchedule, cross_entropy_loss, l2_penalty, lr_at_epoch, spawn_rngs

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    network: str = "cloudsnet"
    epochs: int = 50
    batch_size: int = 32
    patch_size: int = 50
    train_patches: int = 2000
    val_patches: int = 500
    lr_start: float = 1e-6
    lr_end: float = 1e-7
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    loss_reduction: str = "sum"
    train_scenes: list = field(default_factory=list)
    val_scenes: list = field(default_factory=list)
    test_scenes: list = field(default_factory=list)
    checkpoint_dir: str = "checkpoints"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _net_inputs(net: Network, vnir, swir):
    return (vnir if "vnir" in net.inputs else None, swir if "swir" in net.inputs else None)


def _dumps(record):
    return json.dumps(record, sort_keys=True)


def evaluate_patches(net: Network, patches, batch_size=32, check=False):
    """(mean per-pixel loss, overall accuracy) in eval mode."""
    total_loss, labelled = 0.0, 0
    cm = ConfusionMatrix()
    for s in range(0, len(patches), batch_size):
        sl = slice(s, s + batch_size)
        v, w = _net_inputs(net, patches.vnir[sl], patches.swir[sl])
        logits = net.forward(v, w, train=False, check=check)
        labels = patches.labels[sl]
        valid = int((labels != IGNORE_LABEL).sum())
        if valid:
            total_loss += cross_entropy_loss(logits, labels, reduction="sum")[0]
            labelled += valid
        cm.accumulate(logits.argmax(axis=1), labels)
    oa = float(np.trace(cm.counts) / cm.total) if cm.total else None
    return (total_loss / labelled if labelled else None), oa


def train(cfg: RunConfig, train_scenes=None, val_scenes=None, log_file=None):
    """Train ``cfg.network``; writes best/final checkpoints and a JSON-lines log.

    Scenes may be passed in memory; otherwise they are loaded from the paths
    in ``cfg``.  Validation patches come from the validation scenes, or from
    the training scenes when none are given.
    """
    if train_scenes is None:
        train_scenes = [load_scene(p) for p in cfg.train_scenes]
    if val_scenes is None:
        val_scenes = [load_scene(p) for p in cfg.val_scenes] or train_scenes
    if not train_scenes:
        raise ValueError("no training scenes given")
    init_rng, sample_rng, shuffle_rng = spawn_rngs(cfg.seed, 3)
    stats = compute_stats(train_scenes)
    train_set = normalize(sample_patches(train_scenes, cfg.train_patches, cfg.patch_size, sample_rng), stats)
    val_set = normalize(sample_patches(val_scenes, cfg.val_patches, cfg.patch_size, sample_rng), stats)
    net = build_network(cfg.network, rng=init_rng)
    opt = SGD(net.parameters(), cfg.lr_start, cfg.momentum, cfg.weight_decay)
    schedule = LRSchedule(cfg.lr_start, cfg.lr_end, cfg.epochs)

    ckpt = Path(cfg.checkpoint_dir)
    ckpt.mkdir(parents=True, exist_ok=True)
    log_path = Path(log_file) if log_file else ckpt / "train_log.jsonl"
    (ckpt / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    history = []
    best_val = np.inf
    with open(log_path, "w") as logf:
        for epoch in range(cfg.epochs):
            opt.lr = lr_at_epoch(schedule, epoch)
            order = shuffle_rng.permutation(len(train_set))
            epoch_loss, epoch_pixels = 0.0, 0
            for step, s in enumerate(range(0, len(order), cfg.batch_size)):
                batch = train_set.subset(np.sort(order[s:s + cfg.batch_size]))
                v, w = _net_inputs(net, batch.vnir, batch.swir)
                try:
                    logits = net.forward(v, w, train=True, check=True)
                except NonFiniteError as exc:
                    raise NonFiniteError("non-finite activation", epoch=epoch, step=step, layer=exc.layer) from exc
                loss, grad = cross_entropy_loss(logits, batch.labels, reduction=cfg.loss_reduction)
                if not np.isfinite(loss):
                    raise NonFiniteError("non-finite loss", epoch=epoch, step=step, layer="loss")
                pixels = int((batch.labels != IGNORE_LABEL).sum())
                epoch_loss += loss * (pixels if cfg.loss_reduction == "mean" else 1)
                epoch_pixels += pixels
                net.backward(grad.astype(net.dtype, copy=False))
                opt.step(net.gradients())
            penalty, _ = l2_penalty(net.parameters(), cfg.weight_decay)
            try:
                val_loss, val_oa = evaluate_patches(net, val_set, cfg.batch_size, check=True)
            except NonFiniteError as exc:
                raise NonFiniteError("non-finite activation", epoch=epoch, step="validation", layer=exc.layer) from exc
            if val_loss is None or not np.isfinite(val_loss):
                raise NonFiniteError("non-finite validation loss", epoch=epoch, step="validation", layer="loss")
            record = {"epoch": epoch, "lr": opt.lr, "train_loss": epoch_loss / epoch_pixels,
                      "l2_penalty": penalty, "val_loss": val_loss, "val_oa": val_oa}
            logf.write(_dumps(record) + "\n")
            logf.flush()
            history.append(record)
            log.info("epoch %d lr %.3g train %.4f val %.4f oa %.4f", epoch, opt.lr, record["train_loss"],
                     val_loss, val_oa)
            if val_loss < best_val:
                best_val = val_loss
                _save_run(net, opt, stats, ckpt / "best", epoch)
    _save_run(net, opt, stats, ckpt / "final", cfg.epochs - 1)
    return net, stats, history


def _save_run(net, opt, stats, path, epoch):
    save_checkpoint(net, path)
    opt.save(path, epoch)
    (Path(path) / "norm.json").write_text(stats.to_json())


def load_norm(checkpoint_dir) -> NormStats:
    return NormStats.from_json((Path(checkpoint_dir) / "norm.json").read_text())


# -- full-tile inference ---------------------------------------------------------

def predict_scene(net: Network, scene, patch_size, batch_size=8):
    """Label a whole (already normalised) scene window by window.

    Windows are patch-sized and non-overlapping.  The scene is first padded at
    the bottom/right by symmetric reflection up to a whole number of windows
    (VNIR padding = ratio x SWIR padding, so the grids stay registered), and
    the prediction is cropped back.
    """
    r = scene.ratio
    M = patch_size
    h, w = scene.swir.shape
    ph, pw = (-h) % M, (-w) % M
    sw = np.pad(scene.swir.bands, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="symmetric")
    vn = np.pad(scene.vnir.bands, ((0, 0), (0, 0), (0, r * ph), (0, r * pw)), mode="symmetric")
    H, W = scene.vnir.shape
    out = np.zeros(((h + ph) * r, (w + pw) * r), dtype=np.uint8)
    origins = [(y, x) for y in range(0, h + ph, M) for x in range(0, w + pw, M)]
    rM = r * M
    for s in range(0, len(origins), batch_size):
        chunk = origins[s:s + batch_size]
        v = np.stack([vn[0, :, r * y:r * y + rM, r * x:r * x + rM] for y, x in chunk])
        q = np.stack([sw[0, :, y:y + M, x:x + M] for y, x in chunk])
        logits = net.forward(*_net_inputs(net, v, q), train=False)
        labels = logits.argmax(axis=1).astype(np.uint8)
        for (y, x), lab in zip(chunk, labels):
            out[r * y:r * y + rM, r * x:r * x + rM] = lab
    return out[:H, :W]


def evaluate_scenes(net: Network, scenes, stats: NormStats, patch_size, predictor=None):
    """Cumulative confusion matrix over scenes (raw reflectances; normalised here)."""
    cm = ConfusionMatrix()
    for scene in scenes:
        if predictor is None:
            pred = predict_scene(net, normalize_scene(scene, stats), patch_size)
        else:
            pred = predictor(scene)
        cm.accumulate(pred, scene.labels)
    return cm
