"""Synthetic co-registered VNIR/SWIR scenes with exact reference labels.

Geometry: a smoothed Gaussian field is thresholded into a bright region
(clouds + snow) and a dark region (shadows + rest); two further independent
fields split each region into its two classes.  Quantile thresholds make
the class fractions exact up to one pixel.

Spectra: per-class Gaussian reflectances.  Clouds and snow are bright in
VNIR (identical distributions at ``confusability=1``) while SWIR separates
them (clouds bright, snow dark).  ``swir_ambiguity`` pulls shadows towards
snow and rest towards clouds in SWIR.  The SWIR raster is the 4x4 (``ratio``)
block average of a latent full-resolution SWIR field plus sensor noise.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Raster, ScenePair
from .errors import InvalidFractions
from .models import CLASS_NAMES

CLOUDS, SNOW, SHADOWS, REST = range(4)


def _default_vnir_means():
    return [[0.80, 0.78, 0.72], [0.62, 0.58, 0.42], [0.12, 0.10, 0.15], [0.30, 0.38, 0.25]]


@dataclass
class SynthConfig:
    vnir_size: int = 256
    ratio: int = 4
    class_fractions: tuple = (0.45, 0.26, 0.07, 0.22)
    smoothness: float = 8.0
    vnir_means: list = field(default_factory=_default_vnir_means)
    vnir_stds: list = field(default_factory=lambda: [0.05, 0.05, 0.03, 0.04])
    swir_means: list = field(default_factory=lambda: [0.60, 0.08, 0.25, 0.40])
    swir_stds: list = field(default_factory=lambda: [0.05, 0.03, 0.03, 0.04])
    noise_std: float = 0.01
    confusability: float = 0.0
    swir_ambiguity: float = 0.0
    vnir_pixel_size: float = 5.0
    swir_pixel_size: float = 20.0

    def validate(self):
        f = np.asarray(self.class_fractions, dtype=np.float64)
        if f.shape != (4,) or np.any(f < 0) or abs(f.sum() - 1) > 1e-3:
            raise InvalidFractions(f"class fractions {tuple(self.class_fractions)} must be 4 nonnegative values summing to 1")
        if self.vnir_size % self.ratio or self.vnir_size < self.ratio:
            raise ValueError(f"vnir_size {self.vnir_size} must be a positive multiple of {self.ratio}")
        for name in ("confusability", "swir_ambiguity"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def effective_spectra(self):
        """Per-class (vnir_mean, vnir_std, swir_mean, swir_std) after the confusion knobs."""
        vm = np.array(self.vnir_means, dtype=np.float64)
        vs = np.array(self.vnir_stds, dtype=np.float64)
        sm = np.array(self.swir_means, dtype=np.float64)
        ss = np.array(self.swir_stds, dtype=np.float64)
        c = self.confusability
        vm[SNOW] = (1 - c) * vm[SNOW] + c * vm[CLOUDS]
        vs[SNOW] = (1 - c) * vs[SNOW] + c * vs[CLOUDS]
        a = self.swir_ambiguity
        sm[SHADOWS] = (1 - a) * sm[SHADOWS] + a * sm[SNOW]
        ss[SHADOWS] = (1 - a) * ss[SHADOWS] + a * ss[SNOW]
        sm[REST] = (1 - a) * sm[REST] + a * sm[CLOUDS]
        ss[REST] = (1 - a) * ss[REST] + a * ss[CLOUDS]
        return vm, vs, sm, ss

    def to_dict(self):
        d = asdict(self)
        d["class_fractions"] = list(self.class_fractions)
        return d


def _field(rng, n, sigma):
    f = gaussian_filter(rng.standard_normal((n, n)), sigma, mode="wrap")
    return f


def _top_fraction(values, frac):
    """Boolean mask selecting the round(frac * n) largest values (stable on ties)."""
    k = int(round(frac * values.size))
    mask = np.zeros(values.size, dtype=bool)
    if k > 0:
        order = np.argsort(-values, kind="stable")
        mask[order[:k]] = True
    return mask


def synth_labels(cfg: SynthConfig, rng) -> np.ndarray:
    n = cfg.vnir_size
    fc, fs, fsh, fr = (float(v) for v in cfg.class_fractions)
    bright_field = _field(rng, n, cfg.smoothness).ravel()
    split_field = _field(rng, n, cfg.smoothness).ravel()
    dark_field = _field(rng, n, cfg.smoothness).ravel()
    labels = np.full(n * n, REST, dtype=np.uint8)
    bright = _top_fraction(bright_field, fc + fs)
    b_idx = np.flatnonzero(bright)
    d_idx = np.flatnonzero(~bright)
    share_c = fc / (fc + fs) if fc + fs > 0 else 0.0
    clouds = _top_fraction(split_field[b_idx], share_c)
    labels[b_idx[clouds]] = CLOUDS
    labels[b_idx[~clouds]] = SNOW
    share_sh = fsh / (fsh + fr) if fsh + fr > 0 else 0.0
    shadows = _top_fraction(dark_field[d_idx], share_sh)
    labels[d_idx[shadows]] = SHADOWS
    labels[d_idx[~shadows]] = REST
    return labels.reshape(n, n)


def synth_scene(cfg: SynthConfig, rng) -> ScenePair:
    cfg.validate()
    n, r = cfg.vnir_size, cfg.ratio
    labels = synth_labels(cfg, rng)
    vm, vs, sm, ss = cfg.effective_spectra()
    noise = rng.standard_normal((3, n, n))
    vnir = vm[labels].transpose(2, 0, 1) + vs[labels][None] * noise
    vnir += cfg.noise_std * rng.standard_normal((3, n, n))
    latent = sm[labels] + ss[labels] * rng.standard_normal((n, n))
    swir = latent.reshape(n // r, r, n // r, r).mean(axis=(1, 3))
    swir += cfg.noise_std * rng.standard_normal(swir.shape)
    return ScenePair(
        Raster(vnir[None].astype(np.float32), cfg.vnir_pixel_size),
        Raster(swir[None, None].astype(np.float32), cfg.swir_pixel_size),
        labels,
        {"generator": cfg.to_dict(), "class_names": list(CLASS_NAMES)},
    )
