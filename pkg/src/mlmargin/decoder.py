"""Cross-attention pooling head with grouped class projections.

A fixed set of learnable query vectors (one per class group) attends over the
flattened spatial feature map and produces one embedding per group; each
class then projects its group's embedding to a logit, either affinely or as a
cosine score between L2-normalized vectors (the form the angular-margin loss
consumes).

The block is deliberately minimal: one cross-attention layer, no query
self-attention, no positional encodings, no normalization layers.  Queries
carry all position-independent structure, so the output is invariant to any
permutation of spatial positions (up to float summation order).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mlmargin import tensor as T
from mlmargin.tensor import ShapeError, Tensor

__all__ = [
    "DecoderConfig",
    "DecoderParams",
    "ClassifierBank",
    "group_of_class",
    "group_sizes",
    "init_decoder_params",
    "init_classifier_bank",
    "decode",
    "project_logits",
    "attach_gat_head",
]


@dataclass(frozen=True)
class DecoderConfig:
    """Head dimensions.  ``groups`` defaults to min(100, num_classes); classes
    are assigned to groups contiguously in blocks of ceil(K / L)."""

    num_classes: int
    embed_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    groups: int = 0  # 0 selects min(100, num_classes)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        object.__setattr__(self, "groups", self.groups or min(100, self.num_classes))
        if not 1 <= self.groups <= self.num_classes:
            raise ValueError(f"groups must lie in [1, {self.num_classes}], got {self.groups}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")


def group_of_class(j: int, num_classes: int, groups: int) -> int:
    size = -(-num_classes // groups)
    return j // size


def group_sizes(num_classes: int, groups: int) -> list:
    size = -(-num_classes // groups)
    out = []
    remaining = num_classes
    while remaining > 0:
        out.append(min(size, remaining))
        remaining -= size
    return out


@dataclass
class DecoderParams:
    queries: Tensor  # (groups, embed_dim)
    w_q: Tensor  # (embed_dim, embed_dim)
    w_k: Tensor  # (in_channels, embed_dim)
    w_v: Tensor  # (in_channels, embed_dim)
    w_o: Tensor  # (embed_dim, embed_dim)
    ff_w1: Tensor  # (embed_dim, ff_dim)
    ff_b1: Tensor  # (ff_dim,)
    ff_w2: Tensor  # (ff_dim, embed_dim)
    ff_b2: Tensor  # (embed_dim,)

    def parameters(self) -> list:
        return [self.queries, self.w_q, self.w_k, self.w_v, self.w_o,
                self.ff_w1, self.ff_b1, self.ff_w2, self.ff_b2]


@dataclass
class ClassifierBank:
    """Per-class projection vectors over their group embedding.

    With ``normalize`` set, both the class vector and the group embedding go
    through L2 normalization before the dot product, so every logit is a
    cosine in [-1, 1] and no bias is applied.
    """

    weights: Tensor  # (num_classes, embed_dim)
    bias: Tensor  # (num_classes,)
    normalize: bool
    num_groups: int

    def parameters(self) -> list:
        return [self.weights, self.bias]


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


def init_decoder_params(rng: np.random.Generator, cfg: DecoderConfig, in_channels: int) -> DecoderParams:
    m = cfg.embed_dim
    return DecoderParams(
        queries=Tensor(rng.normal(scale=1.0 / math.sqrt(m), size=(cfg.groups, m)), requires_grad=True),
        w_q=_glorot(rng, m, m),
        w_k=_glorot(rng, in_channels, m),
        w_v=_glorot(rng, in_channels, m),
        w_o=_glorot(rng, m, m),
        ff_w1=_glorot(rng, m, cfg.ff_dim),
        ff_b1=Tensor(np.zeros(cfg.ff_dim), requires_grad=True),
        ff_w2=_glorot(rng, cfg.ff_dim, m),
        ff_b2=Tensor(np.zeros(m), requires_grad=True),
    )


def init_classifier_bank(
    rng: np.random.Generator, num_classes: int, embed_dim: int, normalize: bool, num_groups: int
) -> ClassifierBank:
    return ClassifierBank(
        weights=_glorot(rng, num_classes, embed_dim),
        bias=Tensor(np.zeros(num_classes), requires_grad=True),
        normalize=normalize,
        num_groups=num_groups,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, m) -> (..., heads, n, m/heads)"""
    *lead, n, m = x.shape
    x = x.reshape(tuple(lead) + (n, heads, m // heads))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, d) -> (..., n, heads*d)"""
    *lead, h, n, d = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes).reshape(tuple(lead) + (n, h * d))


def decode(f, cfg: DecoderConfig, params: DecoderParams) -> Tensor:
    """Cross-attend group queries over spatial features.

    (channels, h, w) input yields (embed_dim, groups); a leading batch axis
    yields (batch, embed_dim, groups).  Scores use scaled dot-product
    attention at 1/sqrt(embed_dim / heads); the block applies the attention
    output projection with a residual from the raw queries, then a two-layer
    feed-forward with another residual.
    """
    f = f if isinstance(f, Tensor) else Tensor(f)
    if f.ndim not in (3, 4):
        raise ShapeError(f"decode expects rank-3 or rank-4 features, got {f.shape}")
    s = f.shape[-3]
    if params.w_k.shape[0] != s:
        raise ShapeError(f"feature channels {s} do not match key projection {params.w_k.shape}")
    positions = f.shape[-2] * f.shape[-1]
    flat = f.reshape(f.shape[:-3] + (s, positions))
    flat = flat.transpose((1, 0) if f.ndim == 3 else (0, 2, 1))  # (..., positions, channels)

    keys = T.matmul(flat, params.w_k)
    values = T.matmul(flat, params.w_v)
    q = T.matmul(params.queries, params.w_q)

    qh = _split_heads(q, cfg.heads)  # (heads, groups, d)
    kh = _split_heads(keys, cfg.heads)  # (..., heads, positions, d)
    vh = _split_heads(values, cfg.heads)
    d = cfg.embed_dim // cfg.heads
    scores = T.matmul(qh, kh.transpose(_swap_last_two(kh.ndim))) * (1.0 / math.sqrt(d))
    att = T.softmax(scores, axis=-1)
    attended = _merge_heads(T.matmul(att, vh))  # (..., groups, embed_dim)

    x = params.queries + T.matmul(attended, params.w_o)
    hidden = T.relu(T.matmul(x, params.ff_w1) + params.ff_b1)
    x = x + T.matmul(hidden, params.ff_w2) + params.ff_b2
    return x.transpose(_swap_last_two(x.ndim))  # (..., embed_dim, groups)


def _swap_last_two(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def project_logits(v: Tensor, bank: ClassifierBank) -> Tensor:
    """Map group embeddings (embed_dim, groups) to per-class logits.

    Class j reads group j // ceil(K / groups).  normalize=True produces
    cosine logits in [-1, 1] with no bias; normalize=False produces affine
    logits.  A leading batch axis is passed through.
    """
    v = v if isinstance(v, Tensor) else Tensor(v)
    if v.ndim not in (2, 3):
        raise ShapeError(f"expected (embed_dim, groups) embeddings, got {v.shape}")
    k = bank.weights.shape[0]
    groups = v.shape[-1]
    if groups != bank.num_groups:
        raise ShapeError(f"bank expects {bank.num_groups} groups, got {groups}")
    idx = [group_of_class(j, k, groups) for j in range(k)]
    vt = v.transpose(_swap_last_two(v.ndim))  # (..., groups, embed_dim)
    sel = T.take_rows(vt, idx, axis=v.ndim - 2)  # (..., K, embed_dim)
    if bank.normalize:
        logits = (T.l2_normalize(sel, axis=-1) * T.l2_normalize(bank.weights, axis=-1)).sum(axis=-1)
    else:
        logits = (sel * bank.weights).sum(axis=-1) + bank.bias
    return logits


def attach_gat_head(f, gate, cfg: DecoderConfig, params: DecoderParams, bank: ClassifierBank) -> Tensor:
    """Gate feature channels, decode, and project: the graph-branch variant
    of the decoder path.  Equals manual chaining of the three steps."""
    f = f if isinstance(f, Tensor) else Tensor(f)
    gate = gate if isinstance(gate, Tensor) else Tensor(gate)
    if gate.ndim != 1 or gate.shape[0] != f.shape[-3]:
        raise ShapeError(f"gate length {gate.shape} does not match channels {f.shape}")
    gated = f * gate.reshape((gate.shape[0], 1, 1))
    return project_logits(decode(gated, cfg, params), bank)
