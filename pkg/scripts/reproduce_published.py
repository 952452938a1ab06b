"""Rebuild the four published confusion matrices and recompute every score."""
import argparse

from fusionseg.metrics import compare_with_published, format_report, published_matrix, report


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tolerance", type=float, default=0.05, help="percentage points")
    ap.add_argument("--show-reports", action="store_true")
    args = ap.parse_args()
    rows = compare_with_published(args.tolerance)
    for clf, key, published, computed, ok in rows:
        print(f"{'ok  ' if ok else 'FAIL'} {clf:<9} {key:<24} {published:7.2f} {computed:9.4f}")
    worst = max(abs(c - p) for _, _, p, c, _ in rows)
    print(f"{sum(r[4] for r in rows)}/{len(rows)} within {args.tolerance} pp; worst gap {worst:.4f} pp")
    if args.show_reports:
        for clf in ("fcn_vnir", "cloudsnet", "fcn_swir", "rf"):
            print(f"\n== {clf}")
            print(format_report(report(published_matrix(clf))), end="")
    return 0 if all(r[4] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
