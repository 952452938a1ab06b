"""Rasters, scene directories, resampling, patch sampling and normalisation.

A scene directory holds::

    vnir.bin   + vnir.meta.json     f32 (1, 3, H, W)
    swir.bin   + swir.meta.json     f32 (1, 1, H/r, W/r)
    labels.bin + labels.meta.json   u8  (H, W), 0..3 or 255 (unlabelled)
    scene.json                      pixel sizes, class names, generator config
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyRaster, FormatError, SceneTooSmall, ShapeMismatch, ZeroStd
from .models import CLASS_NAMES
from .optim import IGNORE_LABEL
from .tensor import FORMAT_VERSION, load_tensor, save_tensor


@dataclass
class Raster:
    bands: np.ndarray  # (1, C, H, W)
    pixel_size: float = 1.0
    nodata: float | None = None

    def __post_init__(self):
        if self.bands.ndim != 4 or self.bands.shape[0] != 1:
            raise ShapeMismatch(f"raster bands must be (1, C, H, W), got {self.bands.shape}")
        if self.bands.shape[2] < 1 or self.bands.shape[3] < 1:
            raise EmptyRaster("raster has zero height or width")

    @property
    def shape(self):
        return self.bands.shape[2:]

    @property
    def band_count(self):
        return self.bands.shape[1]


@dataclass
class ScenePair:
    vnir: Raster
    swir: Raster
    labels: np.ndarray  # (H, W) uint8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        H, W = self.vnir.shape
        h, w = self.swir.shape
        if H % h or W % w or H // h != W // w:
            raise ShapeMismatch(f"vnir {H}x{W} is not an integer multiple of swir {h}x{w}")
        if self.labels.shape != (H, W):
            raise ShapeMismatch(f"labels {self.labels.shape} must match vnir {H}x{W}")

    @property
    def ratio(self):
        return self.vnir.shape[0] // self.swir.shape[0]


# -- scene files ------------------------------------------------------------------

def save_scene(scene: ScenePair, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_tensor(path / "vnir", scene.vnir.bands.astype(np.float32))
    save_tensor(path / "swir", scene.swir.bands.astype(np.float32))
    save_tensor(path / "labels", scene.labels.astype(np.uint8))
    meta = {
        "version": FORMAT_VERSION,
        "vnir_pixel_size": scene.vnir.pixel_size,
        "swir_pixel_size": scene.swir.pixel_size,
        "class_names": list(CLASS_NAMES),
        "ignore_label": IGNORE_LABEL,
        "generator": scene.meta.get("generator"),
    }
    (path / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_scene(path) -> ScenePair:
    path = Path(path)
    try:
        meta = json.loads((path / "scene.json").read_text())
    except ValueError as exc:
        raise FormatError(f"{path}/scene.json: malformed JSON: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}/scene.json: expected version {FORMAT_VERSION}, found {meta.get('version')!r}")
    vnir = load_tensor(path / "vnir")
    swir = load_tensor(path / "swir")
    labels = load_tensor(path / "labels")
    if labels.dtype != np.uint8 or labels.ndim != 2:
        raise FormatError(f"{path}/labels: expected a 2-D u8 raster, got {labels.dtype} {labels.shape}")
    return ScenePair(
        Raster(vnir, float(meta["vnir_pixel_size"])),
        Raster(swir, float(meta["swir_pixel_size"])),
        labels,
        {"generator": meta.get("generator")},
    )


# -- resampling ----------------------------------------------------------------------

def nn_indices(n_in, src_size, dst_size):
    """Source index for each output pixel whose centre is nearest to it."""
    n_out = max(1, int(round(n_in * src_size / dst_size)))
    j = np.arange(n_out)
    idx = np.floor((j + 0.5) * dst_size / src_size).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def nn_resample(raster: Raster, target_pixel_size: float) -> Raster:
    """Nearest-neighbour resampling to a new pixel size; never invents values."""
    if target_pixel_size <= 0:
        raise ValueError("target pixel size must be positive")
    if raster.bands.size == 0:
        raise EmptyRaster("cannot resample an empty raster")
    if target_pixel_size == raster.pixel_size:
        return Raster(raster.bands.copy(), raster.pixel_size, raster.nodata)
    H, W = raster.shape
    ri = nn_indices(H, raster.pixel_size, target_pixel_size)
    ci = nn_indices(W, raster.pixel_size, target_pixel_size)
    out = raster.bands[:, :, ri][:, :, :, ci]
    return Raster(np.ascontiguousarray(out), float(target_pixel_size), raster.nodata)


# -- patches ---------------------------------------------------------------------------

@dataclass
class PatchSet:
    vnir: np.ndarray     # (n, 3, rM, rM)
    swir: np.ndarray     # (n, 1, M, M)
    labels: np.ndarray   # (n, rM, rM) uint8
    origins: np.ndarray  # (n, 2) SWIR-grid origins (row, col)
    scene_index: np.ndarray
    ratio: int = 4
    normalized: bool = False

    def __len__(self):
        return len(self.vnir)

    def subset(self, idx):
        return replace(self, vnir=self.vnir[idx], swir=self.swir[idx], labels=self.labels[idx],
                       origins=self.origins[idx], scene_index=self.scene_index[idx])

    @property
    def vnir_origins(self):
        return self.origins * self.ratio


def sample_patches(scenes, count, M, rng) -> PatchSet:
    """Uniform random co-registered windows, sampled with replacement.

    A window is M x M on the SWIR grid and rM x rM on the VNIR/label grid
    at origin r * (SWIR origin).  With several scenes, each patch picks a
    scene with probability proportional to its number of valid origins.
    """
    if isinstance(scenes, ScenePair):
        scenes = [scenes]
    if count < 1:
        raise ValueError("count must be >= 1")
    ratios = {s.ratio for s in scenes}
    if len(ratios) != 1:
        raise ShapeMismatch(f"scenes disagree on resolution ratio: {sorted(ratios)}")
    r = ratios.pop()
    n_origins = []
    for s in scenes:
        h, w = s.swir.shape
        if h < M or w < M:
            raise SceneTooSmall(f"swir raster {h}x{w} cannot hold a {M}x{M} window")
        n_origins.append((h - M + 1) * (w - M + 1))
    p = np.array(n_origins, dtype=np.float64)
    which = rng.choice(len(scenes), size=count, p=p / p.sum())
    origins = np.zeros((count, 2), dtype=np.int64)
    for i, si in enumerate(which):
        h, w = scenes[si].swir.shape
        origins[i] = rng.integers(0, h - M + 1), rng.integers(0, w - M + 1)
    rM = r * M
    vn = np.empty((count, scenes[0].vnir.band_count, rM, rM), dtype=np.float32)
    sw = np.empty((count, scenes[0].swir.band_count, M, M), dtype=np.float32)
    lb = np.empty((count, rM, rM), dtype=np.uint8)
    for i, (si, (y, x)) in enumerate(zip(which, origins)):
        s = scenes[si]
        sw[i] = s.swir.bands[0, :, y:y + M, x:x + M]
        vn[i] = s.vnir.bands[0, :, r * y:r * y + rM, r * x:r * x + rM]
        lb[i] = s.labels[r * y:r * y + rM, r * x:r * x + rM]
    return PatchSet(vn, sw, lb, origins, which.astype(np.int64), ratio=r)


# -- normalisation -----------------------------------------------------------------------

@dataclass
class NormStats:
    vnir_mean: list
    vnir_std: list
    swir_mean: list
    swir_std: list

    def __post_init__(self):
        for s in list(self.vnir_std) + list(self.swir_std):
            if not s > 0:
                raise ZeroStd(f"band standard deviation must be positive, got {s}")

    def to_json(self):
        return json.dumps({"version": FORMAT_VERSION, "vnir_mean": self.vnir_mean, "vnir_std": self.vnir_std,
                           "swir_mean": self.swir_mean, "swir_std": self.swir_std}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["vnir_mean"], d["vnir_std"], d["swir_mean"], d["swir_std"])


def _band_stats(arrays):
    """Per-band mean and population std across a list of (1, C, H, W) arrays (float64)."""
    total = sum(a[0].reshape(a.shape[1], -1).shape[1] for a in arrays)
    s = sum(a[0].reshape(a.shape[1], -1).sum(axis=1, dtype=np.float64) for a in arrays)
    mean = s / total
    ss = sum(((a[0].reshape(a.shape[1], -1) - mean[:, None]) ** 2).sum(axis=1) for a in arrays)
    std = np.sqrt(ss / total)
    return [float(v) for v in mean], [float(v) for v in std]


def compute_stats(scenes) -> NormStats:
    """Per-band z-score statistics; call with training scenes only."""
    if isinstance(scenes, ScenePair):
        scenes = [scenes]
    vm, vs = _band_stats([s.vnir.bands for s in scenes])
    sm, ss = _band_stats([s.swir.bands for s in scenes])
    return NormStats(vm, vs, sm, ss)


def zscore(x, mean, std):
    mean = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    std = np.asarray(std, dtype=np.float32)[None, :, None, None]
    if np.any(std <= 0):
        raise ZeroStd("band standard deviation must be positive")
    return ((x - mean) / std).astype(np.float32)


def normalize(patches: PatchSet, stats: NormStats) -> PatchSet:
    """Z-score each band.  Not idempotent, so already-normalised sets are refused."""
    if patches.normalized:
        raise ValueError("patch set is already normalized")
    return replace(patches, vnir=zscore(patches.vnir, stats.vnir_mean, stats.vnir_std),
                   swir=zscore(patches.swir, stats.swir_mean, stats.swir_std), normalized=True)


def normalize_scene(scene: ScenePair, stats: NormStats) -> ScenePair:
    return ScenePair(
        Raster(zscore(scene.vnir.bands, stats.vnir_mean, stats.vnir_std), scene.vnir.pixel_size),
        Raster(zscore(scene.swir.bands, stats.swir_mean, stats.swir_std), scene.swir.pixel_size),
        scene.labels,
        dict(scene.meta, normalized=True),
    )


def pixel_samples(scene: ScenePair, count=None, rng=None):
    """(band vectors, labels) for labelled VNIR pixels, optionally subsampled."""
    X = scene.vnir.bands[0].reshape(scene.vnir.band_count, -1).T
    y = scene.labels.reshape(-1)
    keep = np.flatnonzero(y != IGNORE_LABEL)
    if count is not None and count < keep.size:
        keep = np.sort(rng.choice(keep, size=count, replace=False))
    return np.ascontiguousarray(X[keep]), y[keep].astype(np.int64)
