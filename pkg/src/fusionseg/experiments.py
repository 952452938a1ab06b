"""Desk-scale experiments on synthetic scenes: overfit, fusion ablation, RF contrast."""
from __future__ import annotations

import logging
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import compute_stats, normalize, normalize_scene, pixel_samples, sample_patches
from .errors import NonFiniteError
from .metrics import CLOUDS, SNOW, confusion_matrix, micro_f1, overall_accuracy, pair_discrimination
from .models import build_network
from .optim import SGD, cross_entropy_loss, make_rng, spawn_rngs
from .pipeline import RunConfig, predict_scene, train
from .rf import ForestConfig, predict_pixels, train_forest
from .synth import SynthConfig, synth_scene

log = logging.getLogger(__name__)


# -- overfit ---------------------------------------------------------------------------

@dataclass
class OverfitConfig:
    network: str = "cloudsnet"
    patches: int = 8
    patch_size: int = 16
    scene_size: int = 128
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    max_steps: int = 500
    target: float = 0.99
    seed: int = 0


def overfit(cfg: OverfitConfig):
    """Full-batch SGD on a fixed patch set until training accuracy hits ``cfg.target``.

    Returns a dict with the step reached, final accuracy, and whether the run
    diverged (non-finite loss).
    """
    scene_rng, init_rng = spawn_rngs(cfg.seed, 2)
    scene = synth_scene(SynthConfig(vnir_size=cfg.scene_size), scene_rng)
    ps = normalize(sample_patches(scene, cfg.patches, cfg.patch_size, scene_rng), compute_stats(scene))
    net = build_network(cfg.network, rng=init_rng)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    v = ps.vnir if "vnir" in net.inputs else None
    s = ps.swir if "swir" in net.inputs else None
    acc, loss = 0.0, None
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, cfg.max_steps + 1):
            logits = net.forward(v, s, train=True)
            loss, grad = cross_entropy_loss(logits, ps.labels, reduction="sum")
            if not np.isfinite(loss):
                return {"steps": step, "accuracy": acc, "loss": loss, "diverged": True}
            net.backward(grad)
            opt.step(net.gradients())
            acc = float((net.forward(v, s, train=False).argmax(axis=1) == ps.labels).mean())
            if step % 20 == 0:
                log.info("overfit step %d loss %.4g acc %.4f", step, loss, acc)
            if acc >= cfg.target:
                return {"steps": step, "accuracy": acc, "loss": loss, "diverged": False}
    return {"steps": cfg.max_steps, "accuracy": acc, "loss": loss, "diverged": False}


# -- fusion ablation -------------------------------------------------------------------

@dataclass
class FusionConfig:
    scene_size: int = 256
    confusability: float = 1.0
    swir_ambiguity: float = 1.0
    patch_size: int = 16
    train_patches: int = 200
    val_patches: int = 50
    epochs: int = 20
    batch_size: int = 32
    lr_start: float = 1e-6
    lr_end: float = 1e-7
    seed: int = 0
    networks: tuple = ("cloudsnet", "fcn_vnir", "fcn_swir")
    rf_pixels: int = 8000
    rf: ForestConfig = field(default_factory=ForestConfig)


def make_scenes(cfg: FusionConfig):
    """One training, one validation and one test scene from independent streams."""
    sc = SynthConfig(vnir_size=cfg.scene_size, confusability=cfg.confusability,
                     swir_ambiguity=cfg.swir_ambiguity)
    return [synth_scene(sc, r) for r in spawn_rngs(cfg.seed, 3)]


def _scores(cm):
    p, r, af = micro_f1(cm)
    acc, chance = pair_discrimination(cm, CLOUDS, SNOW)
    return {"oa": overall_accuracy(cm), "avg_f1": af, "precision_mu": p, "recall_mu": r,
            "pair_accuracy": acc, "pair_chance": chance, "counts": cm.counts.tolist()}


def fusion_experiment(cfg: FusionConfig, workdir=None, with_rf=True):
    """Train each network under the same budget and score it on the same test scene."""
    train_scene, val_scene, test_scene = make_scenes(cfg)
    results = {"config": asdict(cfg)}
    predictions = {}
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for name in cfg.networks:
            rc = RunConfig(network=name, epochs=cfg.epochs, batch_size=cfg.batch_size,
                           patch_size=cfg.patch_size, train_patches=cfg.train_patches,
                           val_patches=cfg.val_patches, lr_start=cfg.lr_start, lr_end=cfg.lr_end,
                           seed=cfg.seed, checkpoint_dir=f"{tmp}/{name}")
            try:
                net, stats, history = train(rc, [train_scene], [val_scene])
            except NonFiniteError as exc:
                results[name] = {"error": str(exc)}
                continue
            pred = predict_scene(net, normalize_scene(test_scene, stats), cfg.patch_size)
            results[name] = _scores(confusion_matrix(pred, test_scene.labels))
            results[name]["final_val_loss"] = history[-1]["val_loss"]
            predictions[name] = pred
            log.info("%s: %s", name, {k: results[name][k] for k in ("oa", "avg_f1", "pair_accuracy")})
    if with_rf:
        model, pred = rf_baseline(cfg, train_scene, test_scene)
        results["rf"] = _scores(confusion_matrix(pred, test_scene.labels))
        results["rf_model"] = model
        predictions["rf"] = pred
    results["predictions"] = predictions
    results["test_scene"] = test_scene
    return results


def rf_baseline(cfg: FusionConfig, train_scene, test_scene):
    rng = make_rng(cfg.seed + 1)
    X, y = pixel_samples(train_scene, cfg.rf_pixels, rng)
    model = train_forest(X, y, cfg.rf, rng=rng)
    return model, predict_pixels(model, test_scene.vnir)


def label_consistency(bands, labels):
    """True if every distinct band vector received a single label."""
    X = bands[0].reshape(bands.shape[1], -1).T
    _, first, inv = np.unique(X, axis=0, return_index=True, return_inverse=True)
    lab = labels.ravel()
    return bool(np.all(lab == lab[first][inv.ravel()]))


def transition_rate(labels):
    """Share of horizontally or vertically adjacent pixel pairs whose labels differ."""
    labels = np.asarray(labels)
    h = labels[:, 1:] != labels[:, :-1]
    v = labels[1:] != labels[:-1]
    return float((h.sum() + v.sum()) / (h.size + v.size))
