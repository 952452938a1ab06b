"""Command-line entry point: ``fusionseg <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import Raster, compute_stats, load_scene, normalize_scene, nn_resample, pixel_samples, save_scene
from .errors import FusionSegError, NonFiniteError
from .metrics import compare_with_published, format_report, report
from .models import NETWORKS, build_network, load_checkpoint
from .optim import make_rng, spawn_rngs
from .pipeline import RunConfig, evaluate_scenes, load_norm, predict_scene, train
from .rf import ForestConfig, ForestModel, predict_pixels, train_forest
from .synth import SynthConfig, synth_scene
from .tensor import load_tensor, save_tensor

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "FUSIONSEG_SEED"

log = logging.getLogger("fusionseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def env_seed(default=0):
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


# -- train ---------------------------------------------------------------------------

# flag name -> RunConfig field
_TRAIN_FLAGS = {
    "network": "network", "epochs": "epochs", "batch_size": "batch_size", "patch_size": "patch_size",
    "patches": "train_patches", "val_patches": "val_patches", "lr_start": "lr_start", "lr_end": "lr_end",
    "momentum": "momentum", "weight_decay": "weight_decay", "seed": "seed", "loss_reduction": "loss_reduction",
    "train_scenes": "train_scenes", "val_scenes": "val_scenes", "test_scenes": "test_scenes",
    "checkpoint_dir": "checkpoint_dir",
}


def effective_config(args) -> RunConfig:
    """Defaults <- FUSIONSEG_SEED <- JSON config file <- explicit flags."""
    d = RunConfig().to_dict()
    d["seed"] = env_seed(d["seed"])
    if args.config:
        try:
            d.update(json.loads(Path(args.config).read_text()))
        except OSError as exc:
            raise FusionSegError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except ValueError as exc:
            raise FusionSegError(f"config {args.config} is not valid JSON: {exc}") from exc
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    try:
        cfg = RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise FusionSegError(f"invalid config: {exc}") from exc
    if cfg.network not in NETWORKS:
        raise FusionSegError(f"unknown network {cfg.network!r}; choose from {', '.join(NETWORKS)}")
    if cfg.loss_reduction not in ("sum", "mean"):
        raise FusionSegError(f"loss_reduction must be 'sum' or 'mean', got {cfg.loss_reduction!r}")
    for name in ("epochs", "batch_size", "patch_size", "train_patches", "val_patches"):
        if getattr(cfg, name) < 1:
            raise FusionSegError(f"{name} must be >= 1")
    return cfg


def cmd_train(args):
    cfg = effective_config(args)
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not cfg.train_scenes:
        raise UsageError("no training scenes: pass --train-scenes or set train_scenes in --config")
    _, _, history = train(cfg)
    best = min(history, key=lambda r: r["val_loss"])
    print(f"trained {cfg.network} for {cfg.epochs} epochs; best val loss {best['val_loss']:.4f} "
          f"at epoch {best['epoch']}; checkpoints in {cfg.checkpoint_dir}")
    return EXIT_OK


# -- eval / predict --------------------------------------------------------------------

def _patch_size(args, checkpoint):
    if args.patch_size:
        return args.patch_size
    run_cfg = Path(checkpoint).parent / "config.json"
    if run_cfg.exists():
        return int(json.loads(run_cfg.read_text())["patch_size"])
    return RunConfig.patch_size


def cmd_eval(args):
    net = load_checkpoint(args.checkpoint)
    stats = load_norm(args.checkpoint)
    scenes = [load_scene(p) for p in args.scenes]
    cm = evaluate_scenes(net, scenes, stats, _patch_size(args, args.checkpoint))
    rep = report(cm)
    if args.report:
        Path(args.report).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(format_report(rep), end="")
    return EXIT_OK


def cmd_predict(args):
    net = load_checkpoint(args.checkpoint)
    scene = normalize_scene(load_scene(args.scene), load_norm(args.checkpoint))
    labels = predict_scene(net, scene, _patch_size(args, args.checkpoint))
    save_tensor(args.out, labels)
    print(f"wrote {labels.shape[0]}x{labels.shape[1]} label raster to {args.out}")
    return EXIT_OK


# -- data plumbing ---------------------------------------------------------------------

def cmd_synth(args):
    seed = args.seed if args.seed is not None else env_seed()
    cfg = SynthConfig(vnir_size=args.vnir_size, confusability=args.confusability,
                      swir_ambiguity=args.swir_ambiguity, smoothness=args.smoothness)
    if args.fractions:
        cfg.class_fractions = tuple(args.fractions)
    out = Path(args.out)
    rngs = spawn_rngs(seed, args.count)
    for i, rng in enumerate(rngs):
        scene = synth_scene(cfg, rng)
        scene.meta["generator"] = dict(cfg.to_dict(), seed=seed, index=i)
        target = out if args.count == 1 else out / f"scene_{i:03d}"
        save_scene(scene, target)
        print(target)
    return EXIT_OK


def cmd_resample(args):
    bands = load_tensor(args.input)
    squeeze = bands.ndim == 2
    if squeeze:
        bands = bands[None, None]
    out = nn_resample(Raster(bands, args.pixel_size), args.target).bands
    save_tensor(args.out, out[0, 0] if squeeze else out)
    print(f"{tuple(bands.shape)} -> {tuple(out.shape)}")
    return EXIT_OK


def cmd_stats(args):
    stats = compute_stats([load_scene(p) for p in args.scenes])
    text = stats.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- random forest -----------------------------------------------------------------------

def cmd_rf_train(args):
    seed = args.seed if args.seed is not None else env_seed()
    cfg = ForestConfig(batches=args.batches, trees_per_batch=args.trees_per_batch, max_depth=args.max_depth,
                       min_leaf=args.min_leaf, features_per_split=args.features_per_split,
                       bootstrap=not args.no_bootstrap, seed=seed, oob=args.oob)
    if args.dump_config:
        print(json.dumps(dict(vars(cfg), pixels=args.pixels), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.scenes:
        raise UsageError("rf-train needs at least one --scenes directory")
    rng = make_rng(seed)
    Xs, ys = [], []
    for p in args.scenes:
        X, y = pixel_samples(load_scene(p), args.pixels, rng)
        Xs.append(X)
        ys.append(y)
    model = train_forest(np.concatenate(Xs), np.concatenate(ys), cfg, rng=rng)
    Path(args.out).write_text(model.to_json())
    msg = f"trained {len(model.trees)} trees on {sum(len(y) for y in ys)} pixels -> {args.out}"
    if model.oob_accuracy is not None:
        msg += f" (OOB accuracy {model.oob_accuracy:.4f})"
    print(msg)
    return EXIT_OK


def cmd_rf_predict(args):
    try:
        model = ForestModel.from_json(Path(args.model).read_text())
    except OSError as exc:
        raise FusionSegError(f"cannot read model {args.model}: {exc.strerror}") from exc
    labels = predict_pixels(model, load_scene(args.scene).vnir)
    save_tensor(args.out, labels)
    print(f"wrote {labels.shape[0]}x{labels.shape[1]} label raster to {args.out}")
    return EXIT_OK


# -- verify ------------------------------------------------------------------------------

def cmd_verify(args):
    from .gradcheck import check_all_layers, check_network

    failed = 0
    for clf, key, published, computed, ok in compare_with_published(args.tolerance):
        failed += not ok
        if not ok or args.all_rows:
            shown = "undefined" if computed is None else f"{computed:.4f}"
            print(f"{'ok  ' if ok else 'FAIL'} {clf:<9} {key:<24} published {published:7.2f} computed {shown}")
    print(f"published-matrix check: {'pass' if not failed else f'{failed} mismatches'}")

    worst = 0.0
    for seed in range(args.seeds):
        for name, err in check_all_layers(seed).items():
            worst = max(worst, err)
            if err >= args.grad_tol:
                failed += 1
                print(f"FAIL gradient {name} seed {seed}: rel error {err:.2e}")
        if not args.layers_only:
            rng = make_rng(1000 + seed)
            net = build_network("cloudsnet", rng=rng, dtype=np.float64)
            M = 4
            v = rng.standard_normal((2, 3, 4 * M, 4 * M))
            s = rng.standard_normal((2, 1, M, M))
            y = rng.integers(0, 4, size=(2, 4 * M, 4 * M))
            for name, err in check_network(net, v, s, y, rng).items():
                worst = max(worst, err)
                if err >= args.grad_tol:
                    failed += 1
                    print(f"FAIL gradient network {name} seed {seed}: rel error {err:.2e}")
    print(f"gradient check over {args.seeds} seeds: worst rel error {worst:.2e}")
    return EXIT_OK if not failed else EXIT_NUMERIC


# -- parser ---------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="fusionseg", description="Multiresolution cloud/snow segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network on scene directories")
    t.add_argument("--config", help="JSON file with RunConfig fields")
    t.add_argument("--network", choices=NETWORKS)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--patch-size", type=int, help="SWIR-grid patch side M")
    t.add_argument("--patches", type=int, help="training patches sampled per run")
    t.add_argument("--val-patches", type=int)
    t.add_argument("--lr-start", type=float)
    t.add_argument("--lr-end", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--seed", type=int, help=f"defaults to ${SEED_ENV}, then 0")
    t.add_argument("--loss-reduction", choices=("sum", "mean"))
    t.add_argument("--train-scenes", nargs="+")
    t.add_argument("--val-scenes", nargs="+")
    t.add_argument("--test-scenes", nargs="+")
    t.add_argument("--checkpoint-dir")
    t.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="full-tile evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", nargs="+", required=True)
    e.add_argument("--patch-size", type=int)
    e.add_argument("--report", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="label one scene with a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scene", required=True)
    pr.add_argument("--out", required=True, help="output tensor stem (u8 label raster)")
    pr.add_argument("--patch-size", type=int)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("synth", help="write synthetic scene directories")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--vnir-size", type=int, default=SynthConfig.vnir_size)
    s.add_argument("--confusability", type=float, default=0.0)
    s.add_argument("--swir-ambiguity", type=float, default=0.0)
    s.add_argument("--smoothness", type=float, default=SynthConfig.smoothness)
    s.add_argument("--fractions", type=float, nargs=4, metavar=("CLOUDS", "SNOW", "SHADOWS", "REST"))
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("resample", help="nearest-neighbour resampling of a raster tensor")
    r.add_argument("--in", dest="input", required=True, help="input tensor stem")
    r.add_argument("--out", required=True)
    r.add_argument("--pixel-size", type=float, required=True, help="source pixel size (m)")
    r.add_argument("--target", type=float, required=True, help="target pixel size (m)")
    r.set_defaults(func=cmd_resample)

    st = sub.add_parser("stats", help="per-band normalisation statistics")
    st.add_argument("--scenes", nargs="+", required=True)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)

    d = ForestConfig()
    rt = sub.add_parser("rf-train", help="train the per-pixel Random Forest")
    rt.add_argument("--scenes", nargs="+")
    rt.add_argument("--out", default="forest.json")
    rt.add_argument("--pixels", type=int, default=8000, help="labelled pixels sampled per scene")
    rt.add_argument("--batches", type=int, default=d.batches)
    rt.add_argument("--trees-per-batch", type=int, default=d.trees_per_batch)
    rt.add_argument("--max-depth", type=int, default=d.max_depth)
    rt.add_argument("--min-leaf", type=int, default=d.min_leaf)
    rt.add_argument("--features-per-split", type=int, default=d.features_per_split)
    rt.add_argument("--no-bootstrap", action="store_true")
    rt.add_argument("--oob", action="store_true", help="report out-of-bag accuracy")
    rt.add_argument("--seed", type=int)
    rt.add_argument("--dump-config", action="store_true")
    rt.set_defaults(func=cmd_rf_train)

    rp = sub.add_parser("rf-predict", help="label a scene's VNIR pixels with a forest")
    rp.add_argument("--model", required=True)
    rp.add_argument("--scene", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_rf_predict)

    v = sub.add_parser("verify", help="published-matrix and gradient checks")
    v.add_argument("--tolerance", type=float, default=0.05, help="percentage points")
    v.add_argument("--seeds", type=int, default=10)
    v.add_argument("--grad-tol", type=float, default=1e-4)
    v.add_argument("--layers-only", action="store_true", help="skip the end-to-end network check")
    v.add_argument("--all-rows", action="store_true", help="print every fixture row")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "verbose", False) or os.environ.get("FUSIONSEG_LOG"):
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fusionseg {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"fusionseg {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FusionSegError as exc:
        print(f"fusionseg {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"fusionseg {args.command}: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
