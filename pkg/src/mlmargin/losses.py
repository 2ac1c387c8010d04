"""Margin and asymmetric focal losses for multilabel classification.

Two losses share one convention: a batch of per-class binary problems, loss
summed over classes and averaged over the batch, returned as a scalar Tensor
so gradients flow back to the score matrix.

The angular-margin loss consumes cosine scores (dot products of L2-normalized
embeddings and classifier vectors); the asymmetric focal loss consumes raw
logits.  Both weigh positive and negative terms differently to counter the
heavy negative skew of per-image label vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mlmargin import tensor as T
from mlmargin.tensor import DomainError, ShapeError, Tensor

__all__ = [
    "AamConfig",
    "AslConfig",
    "aam_loss",
    "asl_loss",
    "aam_part_curves",
    "format_part_curves_csv",
]

# Cosine inputs are pulled this far inside [-1, 1] before scaling, so the
# sigmoid never saturates to an exact 0/1 in float64 log terms.
_COS_GUARD = 1e-7
# Probability floor ahead of logs; inactive for any realistic scale.
_P_FLOOR = 1e-300


@dataclass(frozen=True)
class AamConfig:
    """Asymmetric angular-margin loss hyperparameters.

    ``swap_focusing`` exchanges which focusing exponent multiplies which
    term: the default keeps gamma_neg on the positive term and gamma_pos on
    the negative term; swapping applies the opposite (focal-style) pairing.
    """

    s: float = 23.0
    m: float = 0.0
    k: float = 0.7
    gamma_pos: float = 0.0
    gamma_neg: float = 0.0
    swap_focusing: bool = False

    def __post_init__(self):
        if not self.s > 0:
            raise DomainError(f"scale s must be positive, got {self.s}")
        if not 0.0 <= self.k <= 1.0:
            raise DomainError(f"k must lie in [0, 1], got {self.k}")
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise DomainError("focusing exponents must be nonnegative")

    def exponents(self) -> tuple[float, float]:
        """(exponent on the positive term, exponent on the negative term)."""
        if self.swap_focusing:
            return self.gamma_pos, self.gamma_neg
        return self.gamma_neg, self.gamma_pos


@dataclass(frozen=True)
class AslConfig:
    """Asymmetric focal loss hyperparameters (probability-shifted negatives)."""

    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise DomainError("focusing exponents must be nonnegative")
        if not 0.0 <= self.clip < 1.0:
            raise DomainError(f"clip must lie in [0, 1), got {self.clip}")


def _check_pair(scores, y) -> np.ndarray:
    s_shape = scores.shape if isinstance(scores, Tensor) else np.shape(scores)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(s_shape):
        raise ShapeError(f"targets shape {y.shape} does not match scores shape {tuple(s_shape)}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DomainError("targets must be binary 0/1")
    return y


def aam_loss(cos, y, cfg: AamConfig) -> Tensor:
    """Asymmetric angular-margin loss over cosine scores.

    Per element, with p+ = sigmoid(s*(cos - m)) and p- = sigmoid(-s*(cos + m)):

        term = (k/s) * y * p-^g_pos_term * log p+
             + ((1-k)/s) * (1-y) * p+^g_neg_term * log p-

    and the loss is -sum over classes, mean over the batch.  With m = 0,
    p- = 1 - p+ exactly; with gammas 0, k = 0.5, s = 1 this is half the
    binary cross-entropy of sigmoid(cos).
    """
    cos = cos if isinstance(cos, Tensor) else Tensor(cos)
    if cos.ndim != 2:
        raise ShapeError(f"cosine scores must be rank-2 (batch, classes), got {cos.shape}")
    y = _check_pair(cos, y)
    if np.any(np.abs(cos.data) > 1.0 + 1e-9):
        raise DomainError("cosine scores must lie in [-1, 1]")
    g_pos_term, g_neg_term = cfg.exponents()

    c = T.clamp(cos, -1.0 + _COS_GUARD, 1.0 - _COS_GUARD)
    p_pos = T.sigmoid(c * cfg.s - cfg.s * cfg.m)
    p_neg = T.sigmoid(-(c * cfg.s) - cfg.s * cfg.m)
    log_pos = T.log(T.clamp_min(p_pos, _P_FLOOR))
    log_neg = T.log(T.clamp_min(p_neg, _P_FLOOR))

    pos_term = T.power(p_neg, g_pos_term) * log_pos * (cfg.k / cfg.s)
    neg_term = T.power(p_pos, g_neg_term) * log_neg * ((1.0 - cfg.k) / cfg.s)
    per_elem = pos_term * y + neg_term * (1.0 - y)
    batch = cos.shape[0]
    return -(per_elem.sum() * (1.0 / batch))


def asl_loss(logits, y, cfg: AslConfig) -> Tensor:
    """Asymmetric focal loss over raw logits.

    Positive term (1-p)^g+ * log p; negative term pc^g- * log(1 - pc) with
    pc = max(p - clip, 0), so easy negatives below the shift contribute
    exactly zero.  Loss is -sum over classes, mean over the batch; gammas 0
    and clip 0 reduce it to plain binary cross-entropy.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be rank-2 (batch, classes), got {logits.shape}")
    y = _check_pair(logits, y)

    p = T.sigmoid(logits)
    p_shift = T.clamp_min(p - cfg.clip, 0.0)
    log_p = T.log(T.clamp_min(p, 1e-12))
    log_not = T.log(T.clamp_min(1.0 - p_shift, 1e-12))

    pos_term = T.power(1.0 - p, cfg.gamma_pos) * log_p
    neg_term = T.power(p_shift, cfg.gamma_neg) * log_not
    per_elem = pos_term * y + neg_term * (1.0 - y)
    batch = logits.shape[0]
    return -(per_elem.sum() * (1.0 / batch))


def aam_part_curves(cfg: AamConfig, grid) -> np.ndarray:
    """Evaluate the positive and negative loss parts over a cosine grid.

    Returns an (n, 3) array of rows (cos, pos_part, neg_part), where each
    part is the sign-flipped contribution a single positive (resp. negative)
    label with that cosine score would add to the loss.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    if np.any(np.abs(grid) > 1.0):
        raise DomainError("cosine grid must lie within [-1, 1]")
    g_pos_term, g_neg_term = cfg.exponents()
    c = np.clip(grid, -1.0 + _COS_GUARD, 1.0 - _COS_GUARD)

    def sig(z):
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        e = np.exp(z[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    p_pos = sig(cfg.s * (c - cfg.m))
    p_neg = sig(-cfg.s * (c + cfg.m))
    pos_part = -(cfg.k / cfg.s) * np.power(p_neg, g_pos_term) * np.log(np.maximum(p_pos, _P_FLOOR))
    neg_part = -((1.0 - cfg.k) / cfg.s) * np.power(p_pos, g_neg_term) * np.log(np.maximum(p_neg, _P_FLOOR))
    return np.column_stack([grid, pos_part, neg_part])


def format_part_curves_csv(table: np.ndarray) -> str:
    lines = ["cos,pos_part,neg_part"]
    for cos_v, pos_v, neg_v in table:
        lines.append(f"{float(cos_v)!r},{float(pos_v)!r},{float(neg_v)!r}")
    return "\n".join(lines) + "\n"
