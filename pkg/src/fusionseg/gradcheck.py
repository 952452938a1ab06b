"""Central finite-difference checks for layers and whole networks (float64)."""
from __future__ import annotations

import hashlib

import numpy as np

from .layers import BatchNorm2D, Conv2D, ConvTranspose2D, LeakyReLU, MaxPool2D, Softmax
from .optim import cross_entropy_loss, make_rng

STEP = 1e-5


def rel_error(analytic, numeric):
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, arr, indices=None, step=STEP):
    """d f / d arr at the given flat indices, by central differences (arr perturbed in place)."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * step))
    return np.array(out)


def check_layer(layer, x, rng, step=STEP, train=True):
    """Max relative error over d/dx and every parameter for loss = sum(y * R)."""
    y = layer.forward(x, train)
    R = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(layer.forward(x, train) * R))

    layer.forward(x, train)
    gx = layer.backward(R)
    errors = {}
    if gx is not None:
        errors["input"] = rel_error(gx, numeric_grad(loss, x, step=step))
    for name, p in layer.params.items():
        analytic = layer.grads[name].copy()
        errors[name] = rel_error(analytic, numeric_grad(loss, p, step=step))
    return errors


def layer_cases(rng):
    """One small float64 instance of every layer type with a matching input."""
    f64 = np.float64

    def rand(*shape):
        return rng.standard_normal(shape)

    conv = Conv2D(2, 3, 3, dtype=f64, bias=True)
    conv.params["weight"][...] = rand(3, 2, 3, 3)
    conv.params["bias"][...] = rand(3)
    dil = Conv2D(2, 2, 3, dilation=2, dtype=f64)
    dil.params["weight"][...] = rand(2, 2, 3, 3)
    tconv = ConvTranspose2D(2, 3, 4, 2, 1, dtype=f64)
    tconv.params["weight"][...] = rand(2, 3, 4, 4)
    bn = BatchNorm2D(3, dtype=f64)
    bn.params["gamma"][...] = 1 + 0.5 * rand(3)
    bn.params["beta"][...] = rand(3)
    # Keep inputs away from the kink / from pooling ties.
    xr = rand(2, 2, 4, 4)
    xr[np.abs(xr) < 1e-2] += 0.1
    return [
        ("conv", conv, rand(2, 2, 4, 4)),
        ("conv_dilated", dil, rand(2, 2, 4, 4)),
        ("tconv", tconv, rand(2, 2, 3, 3)),
        ("maxpool", MaxPool2D(), rand(2, 2, 4, 4)),
        ("batchnorm", bn, rand(2, 3, 4, 4)),
        ("leaky_relu", LeakyReLU(0.1), xr),
        ("softmax", Softmax(), rand(2, 4, 3, 3)),
    ]


def check_all_layers(seed, step=STEP):
    rng = make_rng(seed)
    results = {}
    for name, layer, x in layer_cases(rng):
        results[name] = max(check_layer(layer, x, rng, step=step).values())
    return results


def activation_pattern(net):
    """Digest of every leaky-ReLU sign mask and max-pool argmax from the last forward pass.

    Two forward passes with the same digest lie on the same linear piece of the
    network's piecewise-smooth loss surface.
    """
    h = hashlib.blake2b(digest_size=16)
    for _, layer in net.named_layers():
        if isinstance(layer, LeakyReLU):
            h.update(np.packbits(layer._cache).tobytes())
        elif isinstance(layer, MaxPool2D):
            h.update(layer._cache[0].astype(np.uint8).tobytes())
    return h.digest()


def check_network(net, vnir, swir, labels, rng, per_param=3, step=STEP, max_tries=20, return_kinks=False):
    """Relative error of the cross-entropy gradient for every parameter tensor.

    Each tensor is probed on ``per_param`` random entries plus one random
    direction through the whole tensor.  A probe whose +step or -step pass
    flips any leaky-ReLU sign or max-pool choice straddles a kink, where the
    central difference estimates no derivative at all; such probes are
    redrawn (up to ``max_tries`` per tensor).  Returns ``{name: error}``, and
    also the number of redrawn probes when ``return_kinks`` is set.
    """
    def loss():
        logits = net.forward(vnir, swir, train=True)
        return cross_entropy_loss(logits, labels)[0], activation_pattern(net)

    logits = net.forward(vnir, swir, train=True)
    base = activation_pattern(net)
    _, g = cross_entropy_loss(logits, labels)
    net.backward(g)
    grads = {k: v.copy() for k, v in net.gradients().items()}

    def probe(p, d):
        orig = p.copy()
        p[...] = orig + step * d
        fp, pp = loss()
        p[...] = orig - step * d
        fm, pm = loss()
        p[...] = orig
        return (fp - fm) / (2 * step), pp == base and pm == base

    errors = {}
    kinks = 0
    for name, p in net.parameters().items():
        ana, num = [], []
        tries = 0
        want = min(per_param, p.size) + 1
        while len(ana) < want and tries < max_tries:
            tries += 1
            d = np.zeros(p.shape)
            if len(ana) < want - 1:
                d.reshape(-1)[rng.integers(p.size)] = 1.0
            else:
                d = rng.standard_normal(p.shape)
                d /= np.linalg.norm(d)
            fd, smooth = probe(p, d)
            if not smooth:
                kinks += 1
                continue
            ana.append(float(np.sum(grads[name] * d)))
            num.append(fd)
        if len(ana) < want:
            errors[name] = float("inf")
            continue
        # entries are compared jointly, the direction on its own
        errors[name] = max(rel_error(ana[:-1], num[:-1]) if len(ana) > 1 else 0.0, rel_error(ana[-1:], num[-1:]))
    return (errors, kinks) if return_kinks else errors
