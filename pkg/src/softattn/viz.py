"""Attention heatmap rendering, Grad-CAM and map-overlap statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import matplotlib
import numpy as np

from . import nn
from . import tensor as T
from .attention import upsample_alpha
from .data import resize_bilinear
from .errors import ContractError, ParameterError, ShapeError
from .tensor import Tape, Tensor


@dataclass
class Heatmap:
    values: np.ndarray
    colormap: str = "jet"
    blend: float = 0.5


@dataclass(frozen=True)
class OverlapStat:
    iou: float
    q: float


def _values(m) -> np.ndarray:
    return np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)


def colorize(values: np.ndarray, colormap: str = "jet") -> np.ndarray:
    """Map values in [0, 1] to RGB in [0, 255]; low is blue, high is red for 'jet'."""
    cmap = matplotlib.colormaps[colormap]
    return cmap(np.clip(values, 0.0, 1.0))[..., :3] * 255.0


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        warnings.warn("constant map; rendering a uniform mid-level heatmap", stacklevel=3)
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def render_heatmap(alpha, image: np.ndarray, blend: float = 0.5,
                   colormap: str = "jet") -> tuple[np.ndarray, np.ndarray]:
    """(map image, overlay image), both ``[H, W, 3]`` floats in [0, 255].

    ``image`` holds values in [0, 1].  The map is upsampled to the image
    size, min-max normalized per image and colorized; the overlay is
    ``blend * map + (1 - blend) * image``.
    """
    if not 0.0 <= blend <= 1.0:
        raise ParameterError(f"blend must lie in [0, 1], got {blend}")
    image = np.asarray(image, dtype=np.float64)
    a = _values(alpha)
    H, W = image.shape[:2]
    if a.shape != (H, W):
        a = upsample_alpha(a, (H, W)).data
    heat = colorize(minmax(a), colormap)
    overlay = blend * heat + (1.0 - blend) * (image * 255.0)
    return heat, overlay


def gradcam(model, image: np.ndarray, target_layer: int | None = None,
            target_class: int | None = None) -> np.ndarray:
    """Grad-CAM map ``[h, w]`` at ``target_layer`` for ``target_class``.

    Channel weights are the spatial mean of d(class logit)/d(feature); the map
    is relu of the weighted channel sum.  Runs in inference mode with dropout
    off; parameter grads are left as they were.
    """
    if target_layer is None:
        target_layer = default_gradcam_layer(model)
    if not 0 <= target_layer < len(model.layers):
        raise ParameterError(f"layer index {target_layer} out of range")
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    saved = [p.grad.copy() for p in model.parameters()]
    trace: dict = {}
    with Tape() as tape:
        logits = model.forward(x, nn.INFER, dropout=False, trace=trace)
        feature = trace[target_layer]
        if feature.ndim != 4:
            raise ParameterError(f"layer {target_layer} output {feature.shape} is not spatial")
        if target_class is None:
            target_class = int(np.argmax(logits.data[0]))
        pick = np.zeros(logits.shape)
        pick[0, target_class] = 1.0
        score = T.reduce_sum(T.mul(logits, Tensor(pick)))
    tape.backward(score)
    grads = tape.grad(feature)[0]
    for p, g in zip(model.parameters(), saved):
        p.grad[...] = g
    weights = grads.mean(axis=(0, 1))
    return np.maximum(feature.data[0] @ weights, 0.0)


def default_gradcam_layer(model) -> int:
    """Index of the last spatial layer before the first flatten."""
    for i, layer in enumerate(model.layers):
        if not layer.spatial:
            if i == 0:
                raise ParameterError("model has no spatial layer")
            return i - 1
    raise ParameterError("model has no flatten layer")


def top_mass_cells(m, q: float) -> np.ndarray:
    """Boolean mask of the smallest cell set holding at least ``q`` of the mass.

    Cells are taken in descending value; equal values go in row-major order.
    """
    v = _values(m)
    if not 0.0 < q < 1.0:
        raise ParameterError(f"q must lie in (0, 1), got {q}")
    if (v < 0).any() or not v.sum() > 0:
        raise ContractError("map must be non-negative with positive mass")
    flat = v.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    cum = np.cumsum(flat[order])
    k = min(int(np.searchsorted(cum, q * cum[-1], side="left")) + 1, flat.size)
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:k]] = True
    return mask.reshape(v.shape)


def overlap_topq(a, b, q: float = 0.5) -> OverlapStat:
    """IoU of the top-``q`` mass regions of two equally shaped maps."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ShapeError(f"maps differ in shape: {av.shape} vs {bv.shape}")
    ma, mb = top_mass_cells(av, q), top_mass_cells(bv, q)
    return OverlapStat(float((ma & mb).sum() / (ma | mb).sum()), q)


def box_mass_fraction(m, row: int, col: int, size: int) -> float:
    v = _values(m)
    return float(v[row:row + size, col:col + size].sum() / v.sum())


def upsample_map(m, shape: tuple[int, int]) -> np.ndarray:
    """Plain bilinear upsampling (no mass rescaling) for display maps."""
    v = _values(m)
    return resize_bilinear(v[:, :, None], shape)[:, :, 0]
