"""Layer primitives on channels-last tensors.

Spatial ops take ``[h, w, c]`` or a batch ``[n, h, w, c]``; an unbatched
input comes back unbatched.  Each primitive carries its own backward rule
instead of being composed from elementwise tensor ops, which keeps tapes
short enough for finite-difference checks over whole models.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, ParameterError, ShapeError
from .tensor import Parameter, SeededRng, Tensor, record

TRAIN = "train"
INFER = "infer"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")


def _batched(fn):
    """Lift a ``[n, h, w, c]`` op so it also accepts ``[h, w, c]``."""

    def wrapper(x, *args, **kwargs):
        if x.ndim == 3:
            out = fn(T.reshape(x, (1,) + x.shape), *args, **kwargs)
            return T.reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ShapeError(f"expected [h,w,c] or [n,h,w,c], got shape {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """(output size, pad before, pad after) for zero 'same' padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


@_batched
def conv2d_raw(x: Tensor, weight: Tensor, bias: Tensor | None = None,
               stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` with a ``[kh, kw, in, out]`` kernel."""
    n, h, w, c = x.shape
    if weight.ndim != 4:
        raise ShapeError(f"kernel must be [kh,kw,in,out], got {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if cin != c:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        ho, pt, pb = same_padding(h, kh, stride)
        wo, pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = np.zeros((n, h + pt + pb, w + pl + pr, c))
    xp[:, pt : pt + h, pl : pl + w, :] = x.data
    wd = weight.data
    span_h, span_w = (ho - 1) * stride + 1, (wo - 1) * stride + 1

    def window(arr, i, j):
        return arr[:, i : i + span_h : stride, j : j + span_w : stride, :]

    # im2col: one [n*ho*wo, kh*kw*c] matrix, columns ordered (i, j, channel)
    cols = np.empty((n, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = window(xp, i, j)
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    out = (cols @ wd.reshape(kh * kw * c, cout)).reshape(n, ho, wo, cout)
    inputs = [x, weight]
    if bias is not None:
        if bias.shape != (cout,):
            raise ShapeError(f"bias must be [{cout}], got {bias.shape}")
        out += bias.data
        inputs.append(bias)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(kh, kw, cin, cout)
        dcols = (g2 @ wd.reshape(kh * kw * c, cout).T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                window(dxp, i, j)[...] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt : pt + h, pl : pl + w, :]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return record("conv2d", out, inputs, backward)


@_batched
def softmax_spatial(logits: Tensor) -> Tensor:
    """Softmax over all h*w positions, independently per head (last axis)."""
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_spatial got non-finite logits")
    n, h, w, k = logits.shape
    z = logits.data.reshape(n, h * w, k)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        g = g.reshape(n, h * w, k)
        return ((s * (g - (g * s).sum(axis=1, keepdims=True))).reshape(n, h, w, k),)

    return record("softmax_spatial", s.reshape(n, h, w, k), (logits,), backward)


@_batched
def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d needs spatial dims >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    xd = x.data
    # window entries in row-major order: (0,0), (0,1), (1,0), (1,1)
    corners = [xd[:, dy : 2 * h2 : 2, dx : 2 * w2 : 2, :] for dy in (0, 1) for dx in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g):
        gx = np.zeros((n, h, w, c))
        taken = np.zeros(out.shape, dtype=bool)
        for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            # ties go to the first maximum in row-major order
            hit = (corners[k] == out) & ~taken
            taken |= hit
            gx[:, dy : 2 * h2 : 2, dx : 2 * w2 : 2, :] = g * hit
        return (gx,)

    return record("maxpool2d", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels needs equal spatial dims, got {a.shape} and {b.shape}")
    return T.concat([a, b], axis=-1)


def flatten(x: Tensor) -> Tensor:
    """Flatten all but the batch axis of a 4-d tensor; everything otherwise."""
    if x.ndim == 4:
        return T.reshape(x, (x.shape[0], -1))
    return T.reshape(x, (-1,))


def dense_raw(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim == 1:
        out = dense_raw(T.reshape(x, (1, x.shape[0])), weight, bias)
        return T.reshape(out, (out.shape[1],))
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense shape mismatch {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias must be [{weight.shape[1]}], got {bias.shape}")
    xd, wd = x.data, weight.data
    return record(
        "dense",
        xd @ wd + bias.data,
        (x, weight, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
    )


# ---------------------------------------------------------------- layers


class Layer:
    kind = "layer"
    spatial = True

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: Tensor, mode: str = INFER, rng: SeededRng | None = None,
                dropout: bool = True) -> Tensor:
        raise NotImplementedError


class Conv2dLayer(Layer):
    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel=(3, 3), padding: str = "same",
                 stride: int = 1, bias: bool = True, rng: SeededRng | None = None):
        kh, kw = kernel
        if padding == "same" and (kh % 2 == 0 or kw % 2 == 0):
            raise ParameterError(f"'same' padding needs an odd kernel, got {kh}x{kw}")
        if stride < 1:
            raise ParameterError(f"stride must be >= 1, got {stride}")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = (kh, kw)
        self.padding, self.stride = padding, stride
        std = math.sqrt(2.0 / (kh * kw * in_ch))
        init = rng.normal(0.0, std, (kh, kw, in_ch, out_ch)) if rng is not None else np.zeros((kh, kw, in_ch, out_ch))
        self.kernels = Parameter(init, name="kernels")
        self.bias = Parameter(np.zeros(out_ch), name="bias") if bias else None

    def parameters(self):
        return [self.kernels] + ([self.bias] if self.bias is not None else [])

    def spec(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": list(self.kernel), "padding": self.padding,
                "stride": self.stride, "bias": self.bias is not None}

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        return conv2d(x, self)


def conv2d(x: Tensor, layer: Conv2dLayer) -> Tensor:
    return conv2d_raw(x, layer.kernels, layer.bias, layer.stride, layer.padding)


class BatchNormLayer(Layer):
    kind = "batchnorm"

    def __init__(self, ch: int, momentum: float = 0.9, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ParameterError(f"momentum must lie in (0, 1), got {momentum}")
        self.ch, self.momentum, self.eps = ch, momentum, eps
        self.gamma = Parameter(np.ones(ch), name="gamma")
        self.beta = Parameter(np.zeros(ch), name="beta")
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return {"kind": self.kind, "ch": self.ch, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        return batchnorm(x, self, mode)


def batchnorm(x: Tensor, layer: BatchNormLayer, mode: str = TRAIN) -> Tensor:
    """Per-channel batch normalization over every axis but the last.

    Train mode uses biased batch statistics (a batch of at least two samples
    is required) and updates the layer's running statistics in place.
    """
    _check_mode(mode)
    if x.shape[-1] != layer.ch:
        raise ShapeError(f"batchnorm expects {layer.ch} channels, got {x.shape[-1]}")
    axes = tuple(range(x.ndim - 1))
    gd, bd = layer.gamma.data, layer.beta.data
    if mode == INFER:
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        xhat = (x.data - layer.running_mean) * inv
        return record(
            "batchnorm",
            gd * xhat + bd,
            (x, layer.gamma, layer.beta),
            lambda g: (g * gd * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)),
        )
    if x.ndim < 2 or x.shape[0] < 2:
        raise ContractError("batchnorm in train mode needs a batch of at least 2")
    m = x.data.size // layer.ch
    mean = x.data.mean(axis=axes)
    centered = x.data - mean
    flat = centered.reshape(-1, layer.ch)
    var = np.einsum("ic,ic->c", flat, flat) / m
    inv = 1.0 / np.sqrt(var + layer.eps)
    xhat = centered * inv
    layer.running_mean[...] = layer.momentum * layer.running_mean + (1 - layer.momentum) * mean
    layer.running_var[...] = layer.momentum * layer.running_var + (1 - layer.momentum) * var

    def backward(g):
        dxhat = g * gd
        dx = (inv / m) * (
            m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batchnorm", gd * xhat + bd, (x, layer.gamma, layer.beta), backward)


class ReLULayer(Layer):
    kind = "relu"

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        return T.relu(x)


class MaxPoolLayer(Layer):
    kind = "maxpool"

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        return maxpool2d(x)


class FlattenLayer(Layer):
    kind = "flatten"
    spatial = False

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        return flatten(x)


class DropoutLayer(Layer):
    kind = "dropout"

    def __init__(self, rate: float = 0.5, mode: str = TRAIN):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
        _check_mode(mode)
        self.rate, self.mode = rate, mode

    def spec(self):
        return {"kind": self.kind, "rate": self.rate}

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        if not dropout:
            return x
        return _dropout(x, self.rate, mode, rng)


def dropout(x: Tensor, layer: DropoutLayer, rng: SeededRng | None = None,
            mode: str | None = None) -> Tensor:
    """Inverted dropout; ``mode`` defaults to the layer's own mode."""
    return _dropout(x, layer.rate, layer.mode if mode is None else mode, rng)


def _dropout(x: Tensor, rate: float, mode: str, rng: SeededRng | None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    _check_mode(mode)
    if mode == INFER or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


class DenseLayer(Layer):
    kind = "dense"
    spatial = False

    def __init__(self, in_features: int, out_features: int, rng: SeededRng | None = None):
        self.in_features, self.out_features = in_features, out_features
        std = math.sqrt(2.0 / (in_features + out_features))
        init = rng.normal(0.0, std, (in_features, out_features)) if rng is not None else np.zeros((in_features, out_features))
        self.weight = Parameter(init, name="weight")
        self.bias = Parameter(np.zeros(out_features), name="bias")

    def parameters(self):
        return [self.weight, self.bias]

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x, mode=INFER, rng=None, dropout=True):
        return dense(x, self)


def dense(x: Tensor, layer: DenseLayer) -> Tensor:
    return dense_raw(x, layer.weight, layer.bias)


relu = T.relu
