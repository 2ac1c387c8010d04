"""Small strided-convolution feature extractor.

Each stage is a 3x3 convolution with stride 2 and unit padding followed by a
ReLU, so a config with n stage widths downscales spatial extents by 2^n and
emits stage_widths[-1] channels.  Convolutions run as patch extraction plus
one matrix product, which keeps every stage differentiable through the same
tensor ops as the rest of the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mlmargin import tensor as T
from mlmargin.tensor import ShapeError, Tensor

__all__ = ["BackboneConfig", "BackboneParams", "init_backbone_params", "extract"]

_KERNEL = 3
_STRIDE = 2
_PAD = 1


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    stage_widths: tuple = (8, 16, 32)

    def __post_init__(self):
        if not self.stage_widths:
            raise ValueError("need at least one stage")
        if any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths must be positive")

    @property
    def downscale(self) -> int:
        return 2 ** len(self.stage_widths)

    @property
    def out_channels(self) -> int:
        return int(self.stage_widths[-1])


@dataclass
class BackboneParams:
    filters: list  # per stage: Tensor(in_c * 9, out_c)
    biases: list  # per stage: Tensor(out_c,)

    def parameters(self) -> list:
        out = []
        for f, b in zip(self.filters, self.biases):
            out.append(f)
            out.append(b)
        return out


def init_backbone_params(rng: np.random.Generator, cfg: BackboneConfig) -> BackboneParams:
    filters, biases = [], []
    in_c = cfg.in_channels
    for out_c in cfg.stage_widths:
        fan_in = in_c * _KERNEL * _KERNEL
        scale = np.sqrt(2.0 / fan_in)  # ReLU-preserving variance
        filters.append(Tensor(rng.normal(scale=scale, size=(fan_in, out_c)), requires_grad=True))
        biases.append(Tensor(np.zeros(out_c), requires_grad=True))
        in_c = out_c
    return BackboneParams(filters=filters, biases=biases)


def extract(x, cfg: BackboneConfig, params: BackboneParams) -> Tensor:
    """(C, H, W) -> (S, H/d, W/d); a leading batch axis is preserved.

    H and W must be divisible by the downscale factor so the strided stages
    land on exact extents.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"extract expects rank-3 or rank-4 input, got {x.shape}")
    c, h, w = x.shape[-3], x.shape[-2], x.shape[-1]
    if c != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {c}")
    d = cfg.downscale
    if h % d != 0 or w % d != 0:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by downscale {d}")

    batched = x.ndim == 4
    out = x
    oh, ow = h, w
    for filt, bias in zip(params.filters, params.biases):
        oh, ow = oh // 2, ow // 2
        out_c = filt.shape[1]
        cols = T.im2col(out, _KERNEL, _STRIDE, _PAD)  # (..., oh*ow, in_c*9)
        fmap = T.relu(T.matmul(cols, filt) + bias)  # (..., oh*ow, out_c)
        fmap = fmap.transpose((0, 2, 1) if batched else (1, 0))
        shape = (x.shape[0], out_c, oh, ow) if batched else (out_c, oh, ow)
        out = fmap.reshape(shape)
    return out
