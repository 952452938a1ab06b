"""Dense NCHW tensors, convolution shape calculus and raw tensor files.

Tensors are plain ``numpy.ndarray`` objects in (batch, channels, height,
width) layout, C-contiguous.  float32 is the training dtype; float64 is used
for finite-difference checks.

On disk a tensor is ``<stem>.bin`` (raw little-endian payload) next to
``<stem>.meta.json`` holding ``{"version": 1, "dtype": "f32", "shape": [...]}``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NegativeOutput, NonFiniteError, NonIntegralOutput, ShapeMismatch

FORMAT_VERSION = 1

DTYPE_CODES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "i64": np.dtype("<i8"),
}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


@dataclass(frozen=True)
class ConvGeometry:
    filter_width: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    cropping: int = 0

    def __post_init__(self):
        if self.filter_width < 1 or self.stride < 1 or self.dilation < 1:
            raise ValueError(f"invalid geometry {self}")
        if self.padding < 0 or self.cropping < 0:
            raise ValueError(f"invalid geometry {self}")

    @property
    def effective_width(self) -> int:
        """Width of the dilated filter, d(F-1)+1."""
        return self.dilation * (self.filter_width - 1) + 1


def same_padding(filter_width: int, dilation: int = 1) -> int:
    """Padding that keeps the spatial size for a stride-1 convolution."""
    eff = dilation * (filter_width - 1) + 1
    if eff % 2 == 0:
        raise NonIntegralOutput(f"effective filter width {eff} is even; no same padding exists")
    return (eff - 1) // 2


def conv_out_size(M: int, geom: ConvGeometry) -> int:
    span = M - geom.effective_width + 2 * geom.padding
    if span < 0:
        raise NegativeOutput(
            f"filter of effective width {geom.effective_width} exceeds padded input {M + 2 * geom.padding}"
        )
    if span % geom.stride:
        raise NonIntegralOutput(f"({M} - {geom.effective_width} + 2*{geom.padding}) not divisible by stride {geom.stride}")
    return span // geom.stride + 1


def tconv_out_size(M: int, geom: ConvGeometry) -> int:
    if M < 1:
        raise ValueError("input size must be >= 1")
    full = geom.stride * (M - 1) + geom.effective_width
    if 2 * geom.cropping > full:
        raise NegativeOutput(f"cropping 2*{geom.cropping} exceeds uncropped output {full}")
    return full - 2 * geom.cropping


def check_4d(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")
    return x


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_4d(a, "a")
    check_4d(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"cannot concatenate {a.shape} and {b.shape} along channels")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"dtype mismatch {a.dtype} vs {b.dtype}")
    return np.concatenate([a, b], axis=1)


def channel_slice(x: np.ndarray, start: int, stop: int) -> np.ndarray:
    check_4d(x)
    if not 0 <= start <= stop <= x.shape[1]:
        raise ShapeMismatch(f"channel range [{start}, {stop}) outside 0..{x.shape[1]}")
    return np.ascontiguousarray(x[:, start:stop])


def check_finite(x: np.ndarray, what: str = "tensor", **context) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}", **context)
    return x


# -- serialization -----------------------------------------------------------

def _stem(path) -> Path:
    p = Path(path)
    if p.name.endswith(".meta.json"):
        return p.with_name(p.name[: -len(".meta.json")])
    if p.suffix == ".bin":
        return p.with_suffix("")
    return p


def meta_bytes(meta: dict) -> bytes:
    return (json.dumps(meta, indent=None, separators=(", ", ": ")) + "\n").encode()


def save_tensor(path, x: np.ndarray) -> None:
    stem = _stem(path)
    dt = np.dtype(x.dtype).newbyteorder("<") if x.dtype.itemsize > 1 else np.dtype(x.dtype)
    if dt not in _CODE_OF:
        raise TypeError(f"unsupported dtype {x.dtype}")
    meta = {"version": FORMAT_VERSION, "dtype": _CODE_OF[dt], "shape": [int(s) for s in x.shape]}
    stem.parent.mkdir(parents=True, exist_ok=True)
    with open(f"{stem}.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(x, dtype=dt).tobytes())
    with open(f"{stem}.meta.json", "wb") as fh:
        fh.write(meta_bytes(meta))


def load_tensor(path) -> np.ndarray:
    stem = _stem(path)
    meta_path = f"{stem}.meta.json"
    try:
        with open(meta_path, "rb") as fh:
            meta = json.loads(fh.read())
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise FormatError(f"{meta_path}: malformed JSON sidecar: {exc}") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{meta_path}: expected version {FORMAT_VERSION}, found {meta.get('version')!r}")
    try:
        dt = DTYPE_CODES[meta["dtype"]]
        shape = tuple(int(s) for s in meta["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{meta_path}: bad dtype/shape fields") from exc
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    bin_path = f"{stem}.bin"
    size = os.path.getsize(bin_path)
    if size != expected:
        raise FormatError(f"{bin_path}: payload size mismatch, expected {expected} bytes", offset=size)
    data = np.fromfile(bin_path, dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="), copy=False)
