"""Layers with explicit forward/backward passes.

Every layer keeps whatever it needs from the last ``forward`` call and
consumes it in ``backward(grad_out)``, which returns the gradient with
respect to the layer input and fills ``layer.grads`` for each entry of
``layer.params``.

Convolutions are cross-correlations.  Three kernels do all the work:

* ``correlate``  - strided, dilated correlation of a padded input,
* ``scatter``    - its adjoint (zero insertion followed by correlation),
* ``tap_gradient`` - the weight gradient shared by both.

A convolution uses ``correlate`` forward and ``scatter`` backward; a
transposed convolution the other way round.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DegenerateBatch, MissingForwardState, OddSpatialDim, ShapeMismatch
from .tensor import ConvGeometry, check_4d, conv_out_size, same_padding, tconv_out_size

# Upper bound on the temporary column buffer per kernel call.
COLUMN_BUDGET_BYTES = 64 * 2**20


def _windows(xp, F, stride, dilation, Ho, Wo):
    """(N, C, Ho, Wo, F, F) strided view of the padded input."""
    sN, sC, sH, sW = xp.strides
    return as_strided(
        xp,
        shape=(xp.shape[0], xp.shape[1], Ho, Wo, F, F),
        strides=(sN, sC, stride * sH, stride * sW, dilation * sH, dilation * sW),
        writeable=False,
    )


def _chunks(n, per_sample_bytes):
    step = max(1, COLUMN_BUDGET_BYTES // max(1, per_sample_bytes))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def correlate(xp, w, stride=1, dilation=1):
    """y[n,k,i,j] = sum_{c,u,v} w[k,c,u,v] * xp[n,c,S*i+d*u,S*j+d*v]; xp already padded."""
    N, C, Hp, Wp = xp.shape
    K, C2, F, _ = w.shape
    if C != C2:
        raise ShapeMismatch(f"input has {C} channels, weights expect {C2}")
    Ho = conv_out_size(Hp, ConvGeometry(F, stride, 0, dilation))
    Wo = conv_out_size(Wp, ConvGeometry(F, stride, 0, dilation))
    out = np.empty((N, K, Ho, Wo), dtype=np.result_type(xp, w))
    per = C * F * F * Ho * Wo * out.itemsize
    for sl in _chunks(N, per):
        cols = _windows(xp[sl], F, stride, dilation, Ho, Wo)
        # (K, n, Ho, Wo)
        y = np.tensordot(w, cols, axes=([1, 2, 3], [1, 4, 5]))
        out[sl] = y.transpose(1, 0, 2, 3)
    return out


def scatter(x, w, stride=1, dilation=1, out_hw=None):
    """Adjoint of ``correlate``: out[n,k,S*i+d*u,S*j+d*v] += w[c,k,u,v] * x[n,c,i,j].

    ``w`` is laid out (C_in, K, F, F).  The result is the uncropped (padded)
    output of size S*(H-1) + d*(F-1) + 1 unless ``out_hw`` asks for more
    (trailing rows that no tap reaches stay zero).
    """
    N, C, H, W = x.shape
    C2, K, F, _ = w.shape
    if C != C2:
        raise ShapeMismatch(f"input has {C} channels, weights expect {C2}")
    Hf = stride * (H - 1) + dilation * (F - 1) + 1
    Wf = stride * (W - 1) + dilation * (F - 1) + 1
    if out_hw is not None:
        Hf, Wf = max(Hf, out_hw[0]), max(Wf, out_hw[1])
    out = np.zeros((N, K, Hf, Wf), dtype=np.result_type(x, w))
    per = K * F * F * H * W * out.itemsize
    for sl in _chunks(N, per):
        # (K, F, F, n, H, W)
        cols = np.tensordot(w, x[sl], axes=([0], [1]))
        o = out[sl]
        for u in range(F):
            r0 = dilation * u
            for v in range(F):
                c0 = dilation * v
                o[:, :, r0:r0 + stride * (H - 1) + 1:stride, c0:c0 + stride * (W - 1) + 1:stride] += (
                    cols[:, u, v].transpose(1, 0, 2, 3)
                )
    return out


def tap_gradient(dense, src_padded, F, stride=1, dilation=1):
    """g[a,b,u,v] = sum_{n,i,j} dense[n,a,i,j] * src_padded[n,b,S*i+d*u,S*j+d*v]."""
    N, A, Ho, Wo = dense.shape
    B = src_padded.shape[1]
    g = np.zeros((A, B, F, F), dtype=np.result_type(dense, src_padded))
    per = B * F * F * Ho * Wo * g.itemsize
    for sl in _chunks(N, per):
        cols = _windows(src_padded[sl], F, stride, dilation, Ho, Wo)
        g += np.tensordot(dense[sl], cols, axes=([0, 2, 3], [0, 2, 3]))
    return g


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _crop(x, p, H, W):
    return np.ascontiguousarray(x[:, :, p:p + H, p:p + W])


class Layer:
    kind = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def _need_cache(self):
        if self._cache is None:
            raise MissingForwardState(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def out_shape(self, in_shape):
        return in_shape

    def __repr__(self):
        return f"{type(self).__name__}()"


class Conv2D(Layer):
    """Same-padded (by default) dilated convolution, weights (K, C, F, F)."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, filter_width, dilation=1, stride=1, padding=None,
                 bias=False, dtype=np.float32):
        super().__init__()
        if padding is None:
            padding = same_padding(filter_width, dilation)
        self.geom = ConvGeometry(filter_width, stride, padding, dilation)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params["weight"] = np.zeros((out_channels, in_channels, filter_width, filter_width), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.input_grad = True

    @property
    def fan_in(self):
        return self.in_channels * self.geom.effective_width ** 2

    @property
    def fan_out(self):
        return self.out_channels * self.geom.effective_width ** 2

    def out_shape(self, in_shape):
        N, C, H, W = in_shape
        if C != self.in_channels:
            raise ShapeMismatch(f"conv expects {self.in_channels} channels, got {C}")
        return (N, self.out_channels, conv_out_size(H, self.geom), conv_out_size(W, self.geom))

    def forward(self, x, train=True):
        check_4d(x)
        self.out_shape(x.shape)
        g = self.geom
        xp = _pad(x, g.padding)
        y = correlate(xp, self.params["weight"], g.stride, g.dilation)
        if "bias" in self.params:
            y += self.params["bias"][None, :, None, None]
        self._cache = (xp, x.shape)
        return y

    def backward(self, grad_out):
        xp, in_shape = self._need_cache()
        g = self.geom
        w = self.params["weight"]
        self.grads["weight"] = tap_gradient(grad_out, xp, g.filter_width, g.stride, g.dilation)
        if "bias" in self.params:
            self.grads["bias"] = grad_out.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        full = scatter(grad_out, w, g.stride, g.dilation, out_hw=xp.shape[2:])
        return _crop(full, g.padding, in_shape[2], in_shape[3])

    def __repr__(self):
        g = self.geom
        return f"Conv2D({self.in_channels}->{self.out_channels}, F={g.filter_width}, d={g.dilation}, P={g.padding})"


class ConvTranspose2D(Layer):
    """Transposed convolution, weights (C_in, K, F, F), output S(M-1)+F-2p."""

    kind = "tconv"

    def __init__(self, in_channels, out_channels, filter_width, stride, cropping, bias=False, dtype=np.float32):
        super().__init__()
        self.geom = ConvGeometry(filter_width, stride, 0, 1, cropping)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.params["weight"] = np.zeros((in_channels, out_channels, filter_width, filter_width), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.input_grad = True

    @property
    def fan_in(self):
        return self.in_channels * self.geom.filter_width ** 2

    @property
    def fan_out(self):
        return self.out_channels * self.geom.filter_width ** 2

    def out_shape(self, in_shape):
        N, C, H, W = in_shape
        if C != self.in_channels:
            raise ShapeMismatch(f"tconv expects {self.in_channels} channels, got {C}")
        return (N, self.out_channels, tconv_out_size(H, self.geom), tconv_out_size(W, self.geom))

    def forward(self, x, train=True):
        check_4d(x)
        _, _, Ho, Wo = self.out_shape(x.shape)
        g = self.geom
        full = scatter(x, self.params["weight"], g.stride)
        y = _crop(full, g.cropping, Ho, Wo)
        if "bias" in self.params:
            y += self.params["bias"][None, :, None, None]
        self._cache = x
        return y

    def backward(self, grad_out):
        x = self._need_cache()
        g = self.geom
        gfull = _pad(grad_out, g.cropping)
        self.grads["weight"] = tap_gradient(x, gfull, g.filter_width, g.stride)
        if "bias" in self.params:
            self.grads["bias"] = grad_out.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        gx = correlate(gfull, self.params["weight"], g.stride)
        return np.ascontiguousarray(gx[:, :, : x.shape[2], : x.shape[3]])

    def __repr__(self):
        g = self.geom
        return f"ConvTranspose2D({self.in_channels}->{self.out_channels}, F={g.filter_width}, S={g.stride}, p={g.cropping})"


class MaxPool2D(Layer):
    """2x2 window, stride 2.  Ties go to the first window element in row-major order."""

    kind = "maxpool"

    def out_shape(self, in_shape):
        N, C, H, W = in_shape
        if H % 2 or W % 2:
            raise OddSpatialDim(f"maxpool needs even spatial dims, got {H}x{W}")
        return (N, C, H // 2, W // 2)

    def forward(self, x, train=True):
        check_4d(x)
        N, C, Ho, Wo = self.out_shape(x.shape)
        win = x.reshape(N, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return y

    def backward(self, grad_out):
        idx, in_shape = self._need_cache()
        N, C, H, W = in_shape
        win = np.zeros(idx.shape + (4,), dtype=grad_out.dtype)
        np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
        return win.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(in_shape)


class BatchNorm2D(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    kind = "bn"

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def out_shape(self, in_shape):
        if in_shape[1] != self.channels:
            raise ShapeMismatch(f"batchnorm expects {self.channels} channels, got {in_shape[1]}")
        return in_shape

    def forward(self, x, train=True):
        check_4d(x)
        self.out_shape(x.shape)
        _c = (None, slice(None), None, None)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise DegenerateBatch(f"batchnorm needs >= 2 samples per channel, got {m}")
            mean = x.mean(axis=(0, 2, 3))
            xc = x - mean[_c]
            var = (xc * xc).mean(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = xc * inv[_c]
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - mom
            rm += mom * mean.astype(rm.dtype)
            rv *= 1 - mom
            rv += mom * (var * (m / (m - 1))).astype(rv.dtype)
            self._cache = (True, xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"][_c]) * inv[_c]
            self._cache = (False, xhat, inv)
        return (gamma[_c] * xhat + beta[_c]).astype(x.dtype, copy=False)

    def backward(self, grad_out):
        train, xhat, inv = self._need_cache()
        _c = (None, slice(None), None, None)
        gamma = self.params["gamma"]
        self.grads["gamma"] = (grad_out * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad_out.sum(axis=(0, 2, 3))
        if not train:
            return grad_out * (gamma * inv)[_c]
        gmean = grad_out.mean(axis=(0, 2, 3))
        gxmean = (grad_out * xhat).mean(axis=(0, 2, 3))
        return (gamma * inv)[_c] * (grad_out - gmean[_c] - xhat * gxmean[_c])


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope=0.1):
        super().__init__()
        if slope < 0:
            raise ValueError("slope must be >= 0")
        self.slope = slope

    def forward(self, x, train=True):
        mask = x >= 0
        self._cache = mask
        return np.where(mask, x, x * x.dtype.type(self.slope))

    def backward(self, grad_out):
        mask = self._need_cache()
        return np.where(mask, grad_out, grad_out * grad_out.dtype.type(self.slope))


class Softmax(Layer):
    """Softmax across the channel axis."""

    kind = "softmax"

    def forward(self, x, train=True):
        y = softmax_channels(x)
        self._cache = y
        return y

    def backward(self, grad_out):
        y = self._need_cache()
        return y * (grad_out - (grad_out * y).sum(axis=1, keepdims=True))


def leaky_relu(x, slope=0.1):
    if slope < 0:
        raise ValueError("slope must be >= 0")
    return np.where(x >= 0, x, x * np.asarray(slope, dtype=x.dtype))


def relu(x):
    return leaky_relu(x, 0.0)


def softmax_channels(x):
    if x.shape[1] < 2:
        raise ShapeMismatch("softmax needs at least 2 channels")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_channels(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
