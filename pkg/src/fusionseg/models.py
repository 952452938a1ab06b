"""CloudSNet and its single-resolution ablations, built from layer tokens.

An architecture is a JSON document whose layer lists use the tokens
``Conv<F>-<d>-<K>``, ``maxpool`` and ``TConv<F>-<S>-<p>-<K>``.  Arms run on
their own input (``vnir``, ``swir``); when a network has two inputs the arm
outputs are concatenated along channels (VNIR first) and fed to the trunk.

Every Conv/TConv is followed by batch norm and a leaky ReLU, except the last
trunk layer, which emits class logits (softmax lives in the loss).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpoint, FormatError, MissingInput, NonFiniteError, ShapeMismatch, UnknownNetwork
from .layers import BatchNorm2D, Conv2D, ConvTranspose2D, LeakyReLU, MaxPool2D
from .optim import make_rng, xavier_init
from .tensor import concat_channels, load_tensor, save_tensor

NETWORKS = ("cloudsnet", "fcn_vnir", "fcn_swir")
CLASS_NAMES = ("clouds", "snow", "shadows", "rest")
INPUT_CHANNELS = {"vnir": 3, "swir": 1}

_CONV = re.compile(r"^Conv(\d+)-(\d+)-(\d+)$")
_TCONV = re.compile(r"^TConv(\d+)-(\d+)-(\d+)-(\d+)$")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | maxpool | tconv | concat
    filter_width: int = 0
    dilation: int = 1
    out_channels: int = 0
    stride: int = 1
    cropping: int = 0
    followed_by_bn: bool = True
    activation: str = "leaky_relu"

    @classmethod
    def parse(cls, token: str) -> "LayerSpec":
        token = token.strip()
        if token == "maxpool":
            return cls("maxpool", filter_width=2, stride=2, followed_by_bn=False, activation="none")
        if token.lower() in ("concat", "concatenation"):
            return cls("concat", followed_by_bn=False, activation="none")
        m = _CONV.match(token)
        if m:
            F, d, K = map(int, m.groups())
            return cls("conv", filter_width=F, dilation=d, out_channels=K)
        m = _TCONV.match(token)
        if m:
            F, S, p, K = map(int, m.groups())
            return cls("tconv", filter_width=F, stride=S, cropping=p, out_channels=K)
        raise ValueError(f"unrecognised layer token {token!r}")

    @property
    def token(self) -> str:
        if self.kind == "maxpool":
            return "maxpool"
        if self.kind == "concat":
            return "Concatenation"
        if self.kind == "conv":
            return f"Conv{self.filter_width}-{self.dilation}-{self.out_channels}"
        return f"TConv{self.filter_width}-{self.stride}-{self.cropping}-{self.out_channels}"

    def as_head(self) -> "LayerSpec":
        return LayerSpec(self.kind, self.filter_width, self.dilation, self.out_channels, self.stride,
                         self.cropping, followed_by_bn=False, activation="softmax")


def load_architecture(name: str) -> dict:
    if name not in NETWORKS:
        raise UnknownNetwork(f"unknown network {name!r}; expected one of {', '.join(NETWORKS)}")
    text = resources.files("fusionseg").joinpath("configs", f"{name}.json").read_text()
    return json.loads(text)


class Block:
    """One token's worth of layers: the main layer plus optional BN and activation."""

    def __init__(self, spec: LayerSpec, in_channels, slope, dtype):
        self.spec = spec
        self.layers = []
        if spec.kind == "maxpool":
            self.layers.append(("pool", MaxPool2D()))
            self.out_channels = in_channels
            return
        if spec.kind == "conv":
            main = Conv2D(in_channels, spec.out_channels, spec.filter_width, dilation=spec.dilation,
                          bias=not spec.followed_by_bn, dtype=dtype)
            self.layers.append(("conv", main))
        elif spec.kind == "tconv":
            main = ConvTranspose2D(in_channels, spec.out_channels, spec.filter_width, spec.stride, spec.cropping,
                                   bias=not spec.followed_by_bn, dtype=dtype)
            self.layers.append(("tconv", main))
        else:
            raise ValueError(f"cannot build a block for {spec.kind!r}")
        self.main = main
        if spec.followed_by_bn:
            self.layers.append(("bn", BatchNorm2D(spec.out_channels, dtype=dtype)))
        if spec.activation == "leaky_relu":
            self.layers.append(("act", LeakyReLU(slope)))
        self.out_channels = spec.out_channels

    def forward(self, x, train):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def out_shape(self, shape):
        for _, layer in self.layers:
            shape = layer.out_shape(shape)
        return shape


class Network:
    """Executable network: input arms, channel fusion, trunk, parameter store."""

    def __init__(self, config: dict, dtype=np.float32):
        self.config = config
        self.name = config["name"]
        self.inputs = tuple(config["inputs"])
        self.dtype = np.dtype(dtype)
        slope = float(config.get("leaky_slope", 0.1))
        self.arms = {}
        arm_out = {}
        for inp in ("vnir", "swir"):
            specs = [LayerSpec.parse(t) for t in config.get(inp, [])]
            if specs and inp not in self.inputs:
                raise ValueError(f"{self.name}: arm {inp!r} given but {inp} is not an input")
            c = int(config.get("in_channels", {}).get(inp, INPUT_CHANNELS[inp]))
            blocks = []
            for s in specs:
                blocks.append(Block(s, c, slope, self.dtype))
                c = blocks[-1].out_channels
            if inp in self.inputs:
                self.arms[inp] = blocks
                arm_out[inp] = c
        trunk_specs = [LayerSpec.parse(t) for t in config["trunk"] if t.lower() not in ("concat", "concatenation")]
        if not trunk_specs or trunk_specs[-1].kind != "conv":
            raise ValueError(f"{self.name}: trunk must end with a convolution")
        trunk_specs[-1] = trunk_specs[-1].as_head()
        c = sum(arm_out[i] for i in self.inputs)
        self.trunk = []
        for s in trunk_specs:
            self.trunk.append(Block(s, c, slope, self.dtype))
            c = self.trunk[-1].out_channels
        self.class_count = c
        self._split = [arm_out[i] for i in self.inputs]
        self._first_blocks_no_input_grad()

    def _first_blocks_no_input_grad(self):
        firsts = [blocks[0] for blocks in self.arms.values() if blocks]
        if len(self.inputs) == 1 and not self.arms[self.inputs[0]]:
            firsts.append(self.trunk[0])
        for b in firsts:
            if hasattr(b, "main"):
                b.main.input_grad = False

    # -- naming -----------------------------------------------------------
    def named_layers(self):
        for inp in self.inputs:
            for i, block in enumerate(self.arms[inp]):
                for tag, layer in block.layers:
                    yield f"{inp}.{i}.{tag}", layer
        for i, block in enumerate(self.trunk):
            for tag, layer in block.layers:
                yield f"trunk.{i}.{tag}", layer

    def parameters(self):
        return {f"{lname}.{p}": arr for lname, layer in self.named_layers() for p, arr in layer.params.items()}

    def buffers(self):
        return {f"{lname}.{b}": arr for lname, layer in self.named_layers() for b, arr in layer.buffers.items()}

    def gradients(self):
        return {f"{lname}.{p}": layer.grads[p] for lname, layer in self.named_layers() for p in layer.params}

    def parameter_count(self):
        return int(sum(a.size for a in self.parameters().values()))

    def init_weights(self, rng):
        """Xavier-uniform conv/tconv filters in a fixed layer order; biases zero, BN identity."""
        for _, layer in self.named_layers():
            if isinstance(layer, (Conv2D, ConvTranspose2D)):
                w = layer.params["weight"]
                w[...] = xavier_init(w.shape, layer.fan_in, layer.fan_out, rng, dtype=w.dtype)
                if "bias" in layer.params:
                    layer.params["bias"][...] = 0

    # -- execution ----------------------------------------------------------
    def _inputs(self, vnir, swir):
        given = {"vnir": vnir, "swir": swir}
        for inp in self.inputs:
            if given[inp] is None:
                raise MissingInput(f"{self.name} requires a {inp} input")
        for inp in ("vnir", "swir"):
            if inp not in self.inputs and given[inp] is not None:
                raise MissingInput(f"{self.name} does not take a {inp} input")
        xs = {}
        for inp in self.inputs:
            x = np.asarray(given[inp])
            if x.ndim != 4:
                raise ShapeMismatch(f"{inp} must be (N, C, H, W), got {x.shape}")
            xs[inp] = x.astype(self.dtype, copy=False)
        if len(xs) == 2:
            v, s = xs["vnir"], xs["swir"]
            ratio = self.resolution_ratio
            if v.shape[0] != s.shape[0] or v.shape[2] != ratio * s.shape[2] or v.shape[3] != ratio * s.shape[3]:
                raise ShapeMismatch(f"vnir {v.shape} and swir {s.shape} are not in {ratio}:1 registration")
        return xs

    @property
    def resolution_ratio(self):
        pools = sum(1 for b in self.arms.get("vnir", []) if b.spec.kind == "maxpool")
        return 2 ** pools

    def forward(self, vnir=None, swir=None, train=False, check=False):
        xs = self._inputs(vnir, swir)
        feats = []
        for inp in self.inputs:
            x = xs[inp]
            for i, block in enumerate(self.arms[inp]):
                x = block.forward(x, train)
                if check:
                    _check(x, f"{inp}.{i}:{block.spec.token}")
            feats.append(x)
        x = feats[0]
        for f in feats[1:]:
            x = concat_channels(x, f)
        for i, block in enumerate(self.trunk):
            x = block.forward(x, train)
            if check:
                _check(x, f"trunk.{i}:{block.spec.token}")
        return x

    def backward(self, grad_logits):
        g = grad_logits
        for block in reversed(self.trunk):
            g = block.backward(g)
        if len(self.inputs) == 1:
            parts = [g]
        else:
            edges = np.cumsum([0] + self._split)
            parts = [g[:, edges[i]:edges[i + 1]] for i in range(len(self._split))]
        for inp, gi in zip(self.inputs, parts):
            for block in reversed(self.arms[inp]):
                if gi is None:
                    break
                gi = block.backward(gi)

    def __call__(self, vnir=None, swir=None, train=False):
        return self.forward(vnir, swir, train)

    def shape_trace(self, vnir_shape=None, swir_shape=None):
        """Walk the graph with the shape calculus only; returns [(label, shape), ...]."""
        trace = []
        shapes = {"vnir": vnir_shape, "swir": swir_shape}
        outs = []
        for inp in self.inputs:
            s = shapes[inp]
            if s is None:
                raise MissingInput(f"{self.name} requires a {inp} shape")
            s = tuple(s)
            trace.append((f"{inp}:input", s))
            for i, block in enumerate(self.arms[inp]):
                s = block.out_shape(s)
                trace.append((f"{inp}.{i}:{block.spec.token}", s))
            outs.append(s)
        s = outs[0]
        if len(outs) > 1:
            for o in outs[1:]:
                if o[0] != s[0] or o[2:] != s[2:]:
                    raise ShapeMismatch(f"cannot fuse arm outputs {s} and {o}")
                s = (s[0], s[1] + o[1], s[2], s[3])
            trace.append(("concat", s))
        for i, block in enumerate(self.trunk):
            s = block.out_shape(s)
            trace.append((f"trunk.{i}:{block.spec.token}", s))
        return trace


def _check(x, where):
    if not np.isfinite(x).all():
        raise NonFiniteError("non-finite activation", layer=where)


def build_network(name, in_channels_vnir=3, in_channels_swir=1, rng=None, dtype=np.float32, config=None):
    cfg = dict(config) if config is not None else load_architecture(name)
    cfg["in_channels"] = {"vnir": in_channels_vnir, "swir": in_channels_swir}
    net = Network(cfg, dtype=dtype)
    net.init_weights(rng if rng is not None else make_rng(0))
    return net


def predict(net: Network, vnir=None, swir=None):
    """Per-pixel argmax of the eval-mode logits; ties go to the lowest class index."""
    logits = net.forward(vnir, swir, train=False)
    return logits.argmax(axis=1).astype(np.uint8)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(net: Network, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in net.config.items()}
    meta = {"version": 1, "dtype": "f64" if net.dtype == np.float64 else "f32", "architecture": cfg}
    (path / "network.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name, arr in net.parameters().items():
        save_tensor(path / "params" / name, arr)
    for name, arr in net.buffers().items():
        save_tensor(path / "buffers" / name, arr)


def load_checkpoint(path, expected_name=None) -> Network:
    path = Path(path)
    try:
        meta = json.loads((path / "network.json").read_text())
    except (OSError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable network.json: {exc}") from exc
    cfg = meta.get("architecture", {})
    name = cfg.get("name")
    if expected_name is not None and name != expected_name:
        raise CorruptCheckpoint(f"{path}: checkpoint holds {name!r}, expected {expected_name!r}")
    if name in NETWORKS:
        reference = load_architecture(name)
        for key in ("inputs", "vnir", "swir", "trunk"):
            if list(cfg.get(key, [])) != list(reference.get(key, [])):
                raise CorruptCheckpoint(f"{path}: layer list {key!r} differs from the {name} architecture")
    dtype = np.float64 if meta.get("dtype") == "f64" else np.float32
    try:
        net = Network(cfg, dtype=dtype)
    except (KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: invalid architecture: {exc}") from exc
    for group, store in (("params", net.parameters()), ("buffers", net.buffers())):
        on_disk = {p.name[: -len(".meta.json")] for p in (path / group).glob("*.meta.json")}
        missing = set(store) - on_disk
        extra = on_disk - set(store)
        if missing or extra:
            raise CorruptCheckpoint(
                f"{path}/{group}: missing {sorted(missing)[:3]} unexpected {sorted(extra)[:3]}"
            )
        for name_, arr in store.items():
            try:
                data = load_tensor(path / group / name_)
            except FormatError as exc:
                raise CorruptCheckpoint(f"{path}/{group}/{name_}: {exc}") from exc
            if data.shape != arr.shape:
                raise CorruptCheckpoint(f"{group}/{name_}: shape {data.shape}, architecture needs {arr.shape}")
            arr[...] = data
    return net
