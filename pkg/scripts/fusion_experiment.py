"""Train CloudSNet, FCN_VNIR and FCN_SWIR (plus the RF) under one budget on confusable scenes."""
import argparse
import json
import logging

from fusionseg.experiments import FusionConfig, fusion_experiment
from fusionseg.rf import ForestConfig


def main():
    d = FusionConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scene-size", type=int, default=d.scene_size)
    ap.add_argument("--confusability", type=float, default=d.confusability)
    ap.add_argument("--swir-ambiguity", type=float, default=d.swir_ambiguity)
    ap.add_argument("--patch-size", type=int, default=d.patch_size)
    ap.add_argument("--patches", type=int, default=d.train_patches)
    ap.add_argument("--epochs", type=int, default=d.epochs)
    ap.add_argument("--lr-start", type=float, default=d.lr_start)
    ap.add_argument("--lr-end", type=float, default=d.lr_end)
    ap.add_argument("--trees-per-batch", type=int, default=ForestConfig.trees_per_batch)
    ap.add_argument("--no-rf", action="store_true")
    ap.add_argument("--seed", type=int, default=d.seed)
    ap.add_argument("--out", help="write the scores as JSON")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = FusionConfig(scene_size=args.scene_size, confusability=args.confusability,
                       swir_ambiguity=args.swir_ambiguity, patch_size=args.patch_size, train_patches=args.patches,
                       epochs=args.epochs, lr_start=args.lr_start, lr_end=args.lr_end, seed=args.seed,
                       rf=ForestConfig(trees_per_batch=args.trees_per_batch))
    res = fusion_experiment(cfg, with_rf=not args.no_rf)
    scores = {k: v for k, v in res.items() if k in ("cloudsnet", "fcn_vnir", "fcn_swir", "rf")}
    for name, s in scores.items():
        if "error" in s:
            print(f"{name:<10} {s['error']}")
            continue
        print(f"{name:<10} OA {100 * s['oa']:6.2f}  cloud/snow avg F1 {100 * (s['avg_f1'] or 0):6.2f}  "
              f"pair acc {100 * s['pair_accuracy']:6.2f} (chance {100 * s['pair_chance']:6.2f})")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"config": res["config"], "scores": scores}, f, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
