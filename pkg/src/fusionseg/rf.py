"""Per-pixel Random Forest baseline with information-gain (entropy) splits.

The training pixels are shuffled once and cut into ``batches`` contiguous
shards; each shard grows ``trees_per_batch`` trees on bootstrap resamples
of itself and all trees are pooled.  Each tree votes with the normalised
class histogram of the leaf a pixel lands in.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BandCountMismatch, DegenerateDataWarning, FormatError
from .optim import make_rng

MODEL_VERSION = 1


@dataclass
class ForestConfig:
    batches: int = 8
    trees_per_batch: int = 400
    max_depth: int = 20
    min_leaf: int = 5
    features_per_split: int = 2
    bootstrap: bool = True
    seed: int = 0
    oob: bool = False


def entropy_bits(counts):
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        clog = np.where(counts > 0, counts * np.log2(np.where(counts > 0, counts, 1)), 0.0).sum(axis=-1)
        h = np.where(n > 0, np.log2(np.where(n > 0, n, 1)) - clog / np.where(n > 0, n, 1), 0.0)
    return h


def info_gain(parent, left, right, k=None):
    """Entropy reduction (bits) of splitting label array ``parent`` into ``left``/``right``.

    Returns None when a child is empty (the candidate is rejected).
    """
    parent, left, right = (np.asarray(a, dtype=np.int64) for a in (parent, left, right))
    if left.size == 0 or right.size == 0:
        return None
    if left.size + right.size != parent.size:
        raise ValueError("children do not partition the parent")
    k = k or int(max(parent.max(), left.max(), right.max())) + 1
    cp, cl, cr = (np.bincount(a, minlength=k) for a in (parent, left, right))
    n = parent.size
    return float(entropy_bits(cp) - left.size / n * entropy_bits(cl) - right.size / n * entropy_bits(cr))


@dataclass
class Tree:
    feature: np.ndarray    # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (nodes, k) class counts

    @property
    def node_count(self):
        return len(self.feature)

    def depth(self):
        d = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def leaf_index(self, X):
        """Leaf reached by each row of X, found by partitioning row sets node by node."""
        cols = np.ascontiguousarray(X.T)
        out = np.zeros(len(X), dtype=np.int64)
        stack = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            f = self.feature[node]
            if f < 0:
                out[idx] = node
                continue
            go_left = cols[f, idx] <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out

    def proba(self, X):
        v = self.value[self.leaf_index(X)].astype(np.float64)
        return v / v.sum(axis=1, keepdims=True)

    def to_dict(self):
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["feature"], dtype=np.int64), np.array(d["threshold"], dtype=np.float64),
                   np.array(d["left"], dtype=np.int64), np.array(d["right"], dtype=np.int64),
                   np.array(d["value"], dtype=np.int64).reshape(len(d["feature"]), -1))


def _best_split(xcol, y, k, min_leaf, parent_h):
    order = np.argsort(xcol, kind="stable")
    xs = xcol[order]
    onehot = np.zeros((len(y), k), dtype=np.int64)
    onehot[np.arange(len(y)), y[order]] = 1
    cum = np.cumsum(onehot, axis=0)
    n = len(y)
    # split after position i: left = first i+1 sorted samples
    i = np.arange(min_leaf - 1, n - min_leaf)
    if i.size == 0:
        return None
    i = i[xs[i] < xs[i + 1]]
    if i.size == 0:
        return None
    lc = cum[i]
    rc = cum[-1] - lc
    nl = (i + 1).astype(np.float64)
    gain = parent_h - nl / n * entropy_bits(lc) - (n - nl) / n * entropy_bits(rc)
    j = int(np.argmax(gain))
    return float(gain[j]), 0.5 * (xs[i[j]] + xs[i[j] + 1])


def grow_tree(X, y, k, cfg: ForestConfig, rng) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(counts):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts)
        return len(feature) - 1

    root = new_node(np.bincount(y, minlength=k))
    stack = [(root, np.arange(len(y)), 0)]
    nf = X.shape[1]
    m = min(cfg.features_per_split, nf)
    while stack:
        node, idx, depth = stack.pop()
        counts = value[node]
        n = idx.size
        if depth >= cfg.max_depth or n < 2 * cfg.min_leaf or np.count_nonzero(counts) <= 1:
            continue
        parent_h = float(entropy_bits(counts))
        best = None
        yi = y[idx]
        for f in rng.choice(nf, size=m, replace=False):
            cand = _best_split(X[idx, f], yi, k, cfg.min_leaf, parent_h)
            if cand is not None and cand[0] > 1e-12 and (best is None or cand[0] > best[0]):
                best = (cand[0], cand[1], int(f))
        if best is None:
            continue
        _, thr, f = best
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(np.bincount(y[li], minlength=k))
        right[node] = new_node(np.bincount(y[ri], minlength=k))
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(value, dtype=np.int64))


@dataclass
class ForestModel:
    trees: list
    class_count: int = 4
    feature_count: int = 3
    config: ForestConfig = field(default_factory=ForestConfig)
    oob_accuracy: float | None = None

    def vote(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_count:
            raise BandCountMismatch(f"expected {self.feature_count} features per sample, got shape {X.shape}")
        votes = np.zeros((len(X), self.class_count))
        for t in self.trees:
            votes += t.proba(X)
        return votes

    def predict(self, X):
        return self.vote(X).argmax(axis=1)

    def to_json(self):
        return json.dumps({
            "version": MODEL_VERSION, "class_count": self.class_count, "feature_count": self.feature_count,
            "config": asdict(self.config), "oob_accuracy": self.oob_accuracy,
            "trees": [t.to_dict() for t in self.trees],
        }, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except ValueError as exc:
            raise FormatError(f"malformed forest JSON: {exc}") from exc
        if d.get("version") != MODEL_VERSION:
            raise FormatError(f"forest model: expected version {MODEL_VERSION}, found {d.get('version')!r}")
        return cls([Tree.from_dict(t) for t in d["trees"]], d["class_count"], d["feature_count"],
                   ForestConfig(**d["config"]), d.get("oob_accuracy"))


def train_forest(X, y, cfg: ForestConfig | None = None, class_count=4, rng=None) -> ForestModel:
    cfg = cfg or ForestConfig()
    rng = rng if rng is not None else make_rng(cfg.seed)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, nf = X.shape
    n_trees = cfg.batches * cfg.trees_per_batch
    present = np.unique(y)
    if present.size < 2:
        warnings.warn(f"training labels contain a single class {present.tolist()}; "
                      "returning a constant classifier", DegenerateDataWarning, stacklevel=2)
        leaf = Tree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                    np.bincount(y, minlength=class_count)[None])
        return ForestModel([leaf] * n_trees, class_count, nf, cfg)
    perm = rng.permutation(n)
    shards = np.array_split(perm, cfg.batches)
    trees = []
    oob_votes = np.zeros((n, class_count)) if cfg.oob else None
    for shard in shards:
        Xs, ys = X[shard], y[shard]
        for _ in range(cfg.trees_per_batch):
            if cfg.bootstrap:
                idx = rng.integers(0, len(shard), size=len(shard))
            else:
                idx = np.arange(len(shard))
            tree = grow_tree(Xs[idx], ys[idx], class_count, cfg, rng)
            trees.append(tree)
            if cfg.oob:
                out = np.setdiff1d(np.arange(len(shard)), idx)
                if out.size:
                    oob_votes[shard[out]] += tree.proba(Xs[out])
    model = ForestModel(trees, class_count, nf, cfg)
    if cfg.oob:
        seen = oob_votes.sum(axis=1) > 0
        model.oob_accuracy = float(np.mean(oob_votes[seen].argmax(axis=1) == y[seen]))
    return model


def predict_pixels(model: ForestModel, raster, chunk=65536):
    """Label raster (H, W) from a (1, C, H, W) band array or Raster."""
    bands = getattr(raster, "bands", raster)
    if bands.ndim != 4 or bands.shape[1] != model.feature_count:
        raise BandCountMismatch(f"model expects {model.feature_count} bands, raster has shape {bands.shape}")
    H, W = bands.shape[2:]
    X = bands[0].reshape(bands.shape[1], -1).T
    out = np.empty(H * W, dtype=np.uint8)
    for s in range(0, len(X), chunk):
        out[s:s + chunk] = model.predict(X[s:s + chunk])
    return out.reshape(H, W)


def default_features_per_split(feature_count):
    return math.ceil(math.sqrt(feature_count))
