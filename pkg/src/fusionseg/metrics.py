"""Confusion matrices and the accuracy / precision / recall / F1 family.

Convention: ``counts[i, j]`` is the number of pixels predicted as class ``i``
(row) whose reference class is ``j`` (column).  Undefined ratios are
reported as ``None`` rather than 0 or NaN.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import EmptyMatrix, LabelOutOfRange, ShapeMismatch
from .models import CLASS_NAMES
from .optim import IGNORE_LABEL

CLOUDS, SNOW = 0, 1
REPORT_VERSION = 1


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))
    class_names: tuple = CLASS_NAMES

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.class_names)
        if self.counts.shape != (n, n):
            raise ShapeMismatch(f"counts must be {n}x{n}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion counts must be nonnegative")

    @property
    def n(self):
        return len(self.class_names)

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, predicted, reference, ignore_label=IGNORE_LABEL):
        predicted = np.asarray(predicted)
        reference = np.asarray(reference)
        if predicted.shape != reference.shape:
            raise ShapeMismatch(f"predicted {predicted.shape} vs reference {reference.shape}")
        keep = reference != ignore_label
        p = predicted[keep].astype(np.int64)
        r = reference[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.n or r.min() < 0 or r.max() >= self.n):
            raise LabelOutOfRange(f"labels must lie in 0..{self.n - 1} (or {ignore_label} in the reference)")
        self.counts += np.bincount(p * self.n + r, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if tuple(other.class_names) != tuple(self.class_names):
            raise ShapeMismatch("cannot merge matrices with different class lists")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def column_percentages(self):
        col = self.counts.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(col > 0, 100.0 * self.counts / np.where(col > 0, col, 1), 0.0)

    @classmethod
    def from_column_percentages(cls, percentages, column_totals, class_names=CLASS_NAMES):
        """Rebuild integer counts as round(pct / 100 * column total)."""
        pct = np.asarray(percentages, dtype=np.float64)
        tot = np.asarray(column_totals, dtype=np.float64)
        return cls(np.rint(pct / 100.0 * tot[None, :]).astype(np.int64), tuple(class_names))


def confusion_matrix(predicted, reference, n=4, ignore_label=IGNORE_LABEL):
    names = CLASS_NAMES if n == 4 else tuple(str(i) for i in range(n))
    return ConfusionMatrix(np.zeros((n, n), dtype=np.int64), names).accumulate(predicted, reference, ignore_label)


def _ratio(num, den):
    return None if den == 0 else num / den


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("overall accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def precision_recall(cm: ConfusionMatrix, a: int):
    C = cm.counts
    return _ratio(float(C[a, a]), float(C[a].sum())), _ratio(float(C[a, a]), float(C[:, a].sum()))


def harmonic(p, r):
    if p is None or r is None or p + r == 0:
        return None
    return 2 * p * r / (p + r)


def f1(cm: ConfusionMatrix, a: int):
    return harmonic(*precision_recall(cm, a))


def micro_f1(cm: ConfusionMatrix, classes=(SNOW, CLOUDS)):
    """Precision and recall pooled over ``classes``, and their harmonic mean."""
    classes = tuple(classes)
    if len(set(classes)) != len(classes):
        raise ValueError("micro-averaged classes must be distinct")
    C = cm.counts
    hits = float(sum(C[k, k] for k in classes))
    p = _ratio(hits, float(sum(C[k].sum() for k in classes)))
    r = _ratio(hits, float(sum(C[:, k].sum() for k in classes)))
    return p, r, harmonic(p, r)


def pair_discrimination(cm: ConfusionMatrix, a=CLOUDS, b=SNOW):
    """Agreement on the a/b sub-block and the agreement expected by chance.

    Restricted to pixels whose reference and prediction are both in {a, b};
    chance is sum_k q_k p_k with q, p the predicted and reference marginals.
    """
    sub = cm.counts[np.ix_([a, b], [a, b])].astype(np.float64)
    tot = sub.sum()
    if tot == 0:
        return None, None
    acc = np.trace(sub) / tot
    q = sub.sum(axis=1) / tot
    pr = sub.sum(axis=0) / tot
    return float(acc), float(q @ pr)


def _pct(v):
    return None if v is None else round(100.0 * v, 4)


def report(cm: ConfusionMatrix) -> dict:
    """Per-class P/R/F1, snow+clouds micro scores, OA and the column-% matrix."""
    per_class = {}
    for a, name in enumerate(cm.class_names):
        p, r = precision_recall(cm, a)
        per_class[name] = {"precision": p, "recall": r, "f1": harmonic(p, r)}
    pm, rm, af = micro_f1(cm)
    return {
        "version": REPORT_VERSION,
        "class_names": list(cm.class_names),
        "counts": cm.counts.tolist(),
        "column_percentages": [[round(float(v), 4) for v in row] for row in cm.column_percentages()],
        "column_totals": [int(v) for v in cm.counts.sum(axis=0)],
        "row_totals": [int(v) for v in cm.counts.sum(axis=1)],
        "per_class": per_class,
        "clouds_and_snow": {"precision_mu": pm, "recall_mu": rm, "avg_f1": af},
        "overall_accuracy": overall_accuracy(cm) if cm.total else None,
    }


def _fmt(v, width=9):
    return f"{'-':>{width}}" if v is None else f"{100 * v:{width}.2f}"


def format_report(rep: dict) -> str:
    """Fixed-width text rendering of ``report`` (percentages, two decimals)."""
    names = rep["class_names"]
    lines = ["Class        Precision   Recall       F1"]
    for name in names:
        pc = rep["per_class"][name]
        lines.append(f"{name:<10}{_fmt(pc['precision'], 12)}{_fmt(pc['recall'])}{_fmt(pc['f1'])}")
    cs = rep["clouds_and_snow"]
    lines.append(f"{'snow+clouds':<10}{_fmt(cs['precision_mu'], 11)}{_fmt(cs['recall_mu'])}{_fmt(cs['avg_f1'])}")
    lines.append(f"OA{_fmt(rep['overall_accuracy'], 20)}")
    lines.append("")
    lines.append("Predicted \\ Reference (% of column)")
    lines.append(f"{'':<10}" + "".join(f"{n:>10}" for n in names) + f"{'Total':>12}")
    for name, row, rt in zip(names, rep["column_percentages"], rep["row_totals"]):
        lines.append(f"{name:<10}" + "".join(f"{v:10.2f}" for v in row) + f"{rt:12d}")
    lines.append(f"{'Total':<10}" + "".join(f"{v:10d}" for v in rep["column_totals"]) + f"{sum(rep['column_totals']):12d}")
    return "\n".join(lines) + "\n"


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "class_names", "counts", "column_percentages", "column_totals", "row_totals",
                 "per_class", "clouds_and_snow", "overall_accuracy"],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "counts": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "column_percentages": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "column_totals": {"type": "array", "items": {"type": "integer"}},
        "row_totals": {"type": "array", "items": {"type": "integer"}},
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["precision", "recall", "f1"],
                "properties": {k: {"type": ["number", "null"]} for k in ("precision", "recall", "f1")},
            },
        },
        "clouds_and_snow": {
            "type": "object",
            "required": ["precision_mu", "recall_mu", "avg_f1"],
            "properties": {k: {"type": ["number", "null"]} for k in ("precision_mu", "recall_mu", "avg_f1")},
        },
        "overall_accuracy": {"type": ["number", "null"]},
    },
}


# -- published reference matrices ---------------------------------------------------

CLASSIFIERS = ("fcn_vnir", "cloudsnet", "fcn_swir", "rf")


def fixture_name(classifier: str) -> str:
    if classifier not in CLASSIFIERS:
        raise KeyError(f"no published matrix for {classifier!r}")
    return f"confusion_{classifier}"


def load_fixture(name: str) -> dict:
    return json.loads(resources.files("fusionseg").joinpath("fixtures", f"{name}.json").read_text())


def published_matrix(classifier: str) -> ConfusionMatrix:
    fx = load_fixture(fixture_name(classifier))
    return ConfusionMatrix.from_column_percentages(fx["column_percentages"], fx["column_totals"])


def published_scores() -> dict:
    return load_fixture("published_scores")["scores"]


def compare_with_published(tolerance_pp=0.05):
    """Every published score vs the value recomputed from the published matrix.

    Returns a list of (classifier, metric, published %, computed %, ok).
    """
    rows = []
    for clf, scores in published_scores().items():
        rep = report(published_matrix(clf))
        for key, published in scores.items():
            computed = _lookup(rep, key)
            ok = computed is not None and abs(100 * computed - published) <= tolerance_pp + 1e-9
            rows.append((clf, key, published, None if computed is None else 100 * computed, ok))
    return rows


def _lookup(rep, key):
    if key == "oa":
        return rep["overall_accuracy"]
    group, metric = key.split(".")
    if group == "clouds_and_snow":
        return rep["clouds_and_snow"][metric]
    return rep["per_class"][group][metric]
