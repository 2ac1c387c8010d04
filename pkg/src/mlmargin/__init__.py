"""Desk-scale multilabel classification: margin losses, label-graph gating,
cross-attention decoding, and a small training engine on a numpy autodiff core."""

from mlmargin.tensor import Tensor, ShapeError, DomainError, gradcheck

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "DomainError", "gradcheck", "__version__"]
