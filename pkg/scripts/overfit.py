"""Drive CloudSNet to memorise a handful of synthetic patches with full-batch SGD."""
import argparse
import json
import logging

from fusionseg.experiments import OverfitConfig, overfit


def main():
    d = OverfitConfig()
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lr", type=float, default=d.lr)
    ap.add_argument("--momentum", type=float, default=d.momentum)
    ap.add_argument("--steps", type=int, default=d.max_steps)
    ap.add_argument("--patches", type=int, default=d.patches)
    ap.add_argument("--patch-size", type=int, default=d.patch_size)
    ap.add_argument("--network", default=d.network)
    ap.add_argument("--seed", type=int, default=d.seed)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = OverfitConfig(network=args.network, patches=args.patches, patch_size=args.patch_size, lr=args.lr,
                        momentum=args.momentum, max_steps=args.steps, seed=args.seed)
    res = overfit(cfg)
    print(json.dumps(res, default=float))
    return 0 if res["accuracy"] >= cfg.target else 1


if __name__ == "__main__":
    raise SystemExit(main())
