"""Soft-attention block for convolutional feature maps.

Given a feature tensor ``t`` of shape ``[h, w, d]`` the block convolves it
with ``K`` kernels that span the full channel depth, turns each of the ``K``
logit maps into a spatial probability map, sums the maps into a single
weighting map ``alpha`` and scales ``t`` by ``gamma * alpha``.  The scaled
features rejoin the main branch through 2x2 max pooling, channel
concatenation, relu and dropout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import resize_bilinear
from .errors import ParameterError, ShapeError
from .tensor import Parameter, SeededRng, Tensor


@dataclass(frozen=True)
class SoftAttentionConfig:
    k: int = 16
    kernel: tuple[int, int] | str = (3, 3)
    gamma_init: float = 0.01
    dropout: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ParameterError(f"K must be >= 1, got {self.k}")
        if not self.gamma_init > 0:
            raise ParameterError(f"gamma_init must be positive, got {self.gamma_init}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.kernel != "full":
            kh, kw = self.kernel
            if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
                raise ParameterError(f"kernel extent must be odd, got {self.kernel}")
            object.__setattr__(self, "kernel", (int(kh), int(kw)))


class SoftAttentionState:
    """Learnable attention parameters: head kernels and the scalar gate."""

    def __init__(self, head_weights: Parameter, gamma: Parameter):
        if head_weights.ndim != 4:
            raise ShapeError(f"head weights must be [kh,kw,d,K], got {head_weights.shape}")
        if gamma.size != 1:
            raise ShapeError(f"gamma must be a scalar, got shape {gamma.shape}")
        self.head_weights = head_weights
        self.gamma = gamma

    @classmethod
    def create(cls, depth: int, config: SoftAttentionConfig, rng: SeededRng,
               spatial: tuple[int, int] | None = None) -> "SoftAttentionState":
        if config.kernel == "full":
            if spatial is None:
                raise ParameterError("a full-map kernel needs the feature map size")
            kh, kw = spatial
        else:
            kh, kw = config.kernel
        std = math.sqrt(2.0 / (kh * kw * depth))
        weights = Parameter(rng.normal(0.0, std, (kh, kw, depth, config.k)), name="head_weights")
        return cls(weights, Parameter(np.array([config.gamma_init]), name="gamma"))

    @property
    def depth(self) -> int:
        return self.head_weights.shape[2]

    @property
    def k(self) -> int:
        return self.head_weights.shape[3]

    def parameters(self) -> list[Parameter]:
        return [self.head_weights, self.gamma]


@dataclass
class SoftAttentionOutput:
    f_sa: Tensor
    alpha: Tensor
    head_maps: Tensor


def conv3d_heads(t: Tensor, weights: Tensor) -> Tensor:
    """``K`` logit maps from kernels spanning the full channel depth."""
    if weights.ndim != 4:
        raise ShapeError(f"head weights must be [kh,kw,d,K], got {weights.shape}")
    if t.shape[-1] != weights.shape[2]:
        raise ShapeError(f"feature depth {t.shape[-1]} != kernel depth {weights.shape[2]}")
    return nn.conv2d_raw(t, weights, None, 1, "same")


def sa_forward(t: Tensor, state: SoftAttentionState) -> SoftAttentionOutput:
    if t.ndim not in (3, 4):
        raise ShapeError(f"expected [h,w,d] or [n,h,w,d], got {t.shape}")
    if t.shape[-1] != state.depth:
        raise ShapeError(f"feature depth {t.shape[-1]} != attention depth {state.depth}")
    head_maps = nn.softmax_spatial(conv3d_heads(t, state.head_weights))
    alpha_map = T.reduce_sum(head_maps, -1, keepdims=True)
    f_sa = T.scale(T.mul(t, alpha_map), state.gamma)
    alpha = T.reshape(alpha_map, alpha_map.shape[:-1])
    return SoftAttentionOutput(f_sa=f_sa, alpha=alpha, head_maps=head_maps)


def sa_integrate(main: Tensor, t: Tensor, state: SoftAttentionState, mode: str = nn.INFER,
                 rng: SeededRng | None = None, rate: float = 0.5, dropout: bool = True,
                 with_attention: bool = False):
    """Pool both branches, concatenate channels, relu, then dropout.

    Output shape is ``[h//2, w//2, d_main + d]`` (with a leading batch axis
    when the inputs have one).  With ``with_attention`` the
    :class:`SoftAttentionOutput` is returned alongside.
    """
    if main.ndim != t.ndim or main.shape[:-1] != t.shape[:-1]:
        raise ShapeError(f"main {main.shape} and attention input {t.shape} differ spatially")
    sa = sa_forward(t, state)
    joined = nn.concat_channels(nn.maxpool2d(main), nn.maxpool2d(sa.f_sa))
    out = T.relu(joined)
    if dropout:
        out = nn._dropout(out, rate, mode, rng)
    return (out, sa) if with_attention else out


def upsample_alpha(alpha, target: tuple[int, int]) -> Tensor:
    """Bilinear upsampling of an attention map, rescaled to keep its total."""
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"alpha must be [h,w], got {a.shape}")
    H, W = target
    if H < a.shape[0] or W < a.shape[1]:
        raise ParameterError(f"target {target} smaller than source {a.shape}")
    up = resize_bilinear(a[:, :, None], (H, W))[:, :, 0]
    total = up.sum()
    if total != 0:
        up = up * (a.sum() / total)
    return Tensor(up)


class SoftAttentionBlock(nn.Layer):
    """Model layer that applies :func:`sa_integrate` with ``main = t``.

    The most recent :class:`SoftAttentionOutput` is kept in ``last``.
    """

    kind = "soft_attention"

    def __init__(self, depth: int, config: SoftAttentionConfig, rng: SeededRng,
                 spatial: tuple[int, int] | None = None):
        self.config = config
        self.map_size = spatial
        self.state = SoftAttentionState.create(depth, config, rng, spatial)
        self.last: SoftAttentionOutput | None = None

    def parameters(self):
        return self.state.parameters()

    def spec(self):
        return {
            "kind": self.kind,
            "depth": self.state.depth,
            "k": self.config.k,
            "kernel": self.config.kernel if self.config.kernel == "full" else list(self.config.kernel),
            "gamma_init": self.config.gamma_init,
            "dropout": self.config.dropout,
            "spatial": list(self.map_size) if self.map_size else None,
        }

    def forward(self, x, mode=nn.INFER, rng=None, dropout=True):
        out, self.last = sa_integrate(
            x, x, self.state, mode, rng, self.config.dropout, dropout, with_attention=True
        )
        return out
