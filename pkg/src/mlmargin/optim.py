"""Optimization machinery: momentum SGD, a sharpness-aware wrapper around it,
the rank-based weight-decay policy, a one-cycle learning-rate schedule, and
exponential moving-average shadow weights.

All optimizers drive a closure: a zero-argument callable that runs the
forward pass and returns the scalar loss Tensor.  The optimizer zeroes
gradients, backpropagates, and applies updates in-place on parameter data.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from mlmargin.tensor import Tensor

__all__ = [
    "SamConfig",
    "OneCycleConfig",
    "Sgd",
    "Sam",
    "Ema",
    "apply_decay_policy",
    "onecycle_lr",
    "zero_grads",
    "global_grad_norm",
]


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    lr: float = 0.007
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError(f"rho must be nonnegative, got {self.rho}")


@dataclass(frozen=True)
class OneCycleConfig:
    max_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    div_initial: float = 25.0
    div_final: float = 1e4

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError("total_steps must be at least 2 (one warmup, one anneal step)")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def global_grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def apply_decay_policy(params) -> list:
    """Weight decay only touches rank >= 2 parameters (matrices and filters);
    vectors — biases, gains, attention vectors — are exempt."""
    return [1.0 if p.ndim >= 2 else 0.0 for p in params]


class Sgd:
    """Momentum SGD with masked weight decay.

    ``step`` evaluates the closure once, backpropagates, and updates every
    parameter as: buf = momentum * buf + (grad + wd * mask * param);
    param -= lr * buf.
    """

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = apply_decay_policy(self.params)
        self.momentum_buffers = [np.zeros_like(p.data) for p in self.params]

    def _apply_update(self, grads, lr: float) -> None:
        for p, g, buf, mask in zip(self.params, grads, self.momentum_buffers, self.decay_mask):
            g = g + (self.weight_decay * mask) * p.data
            buf *= self.momentum
            buf += g
            p.data -= lr * buf

    def _gradients(self):
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]

    def step(self, closure, lr: float) -> float:
        zero_grads(self.params)
        loss = closure()
        loss.backward()
        self._apply_update(self._gradients(), lr)
        return float(loss.data)


class Sam(Sgd):
    """Sharpness-aware two-phase step over the same base update.

    Phase one measures the gradient, climbs rho * g / ||g|| (global L2 norm
    across all parameters), phase two re-measures the gradient there, the
    climb is undone, and the base update applies the phase-two gradient at
    the original weights.  rho = 0 or a zero gradient skips the climb, making
    the step identical to plain SGD.
    """

    def __init__(self, params, rho: float = 0.05, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, momentum=momentum, weight_decay=weight_decay)
        if rho < 0:
            raise ValueError(f"rho must be nonnegative, got {rho}")
        self.rho = rho

    def step(self, closure, lr: float) -> float:
        zero_grads(self.params)
        loss = closure()
        loss.backward()
        grads = self._gradients()
        norm = global_grad_norm(self.params)
        if self.rho > 0.0 and norm > 0.0:
            scale = self.rho / norm
            originals = [p.data for p in self.params]
            for p, g in zip(self.params, grads):
                p.data = p.data + scale * g
            zero_grads(self.params)
            perturbed_loss = closure()
            perturbed_loss.backward()
            grads = self._gradients()
            # restore the exact pre-climb values, not climb-minus-epsilon
            for p, orig in zip(self.params, originals):
                p.data = orig
        self._apply_update(grads, lr)
        return float(loss.data)


def onecycle_lr(step: int, cfg: OneCycleConfig) -> float:
    """Cosine warmup from max_lr/div_initial to max_lr over the warmup span,
    then cosine annealing down to max_lr/div_final at the final step."""
    init = cfg.max_lr / cfg.div_initial
    final = cfg.max_lr / cfg.div_final
    warmup = int(round(cfg.warmup_frac * cfg.total_steps))
    warmup = min(max(warmup, 1), cfg.total_steps - 1)
    t = min(max(step, 0), cfg.total_steps)
    # convex-combination form: the endpoints come out bit-exact because the
    # inactive side is multiplied by exactly 0.0
    if t <= warmup:
        u = (1.0 - math.cos(math.pi * (t / warmup))) / 2.0
        return init * (1.0 - u) + cfg.max_lr * u
    u = (1.0 + math.cos(math.pi * ((t - warmup) / (cfg.total_steps - warmup)))) / 2.0
    return final * (1.0 - u) + cfg.max_lr * u


class Ema:
    """Exponential moving average of parameter values.

    shadow <- decay * shadow + (1 - decay) * param after every optimizer
    step; evaluation swaps the shadow in and restores the live weights after.
    """

    def __init__(self, params, decay: float = 0.9997):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.shadow = [p.data.copy() for p in params]

    def update(self, params) -> None:
        for s, p in zip(self.shadow, params):
            s *= self.decay
            s += (1.0 - self.decay) * p.data

    @contextmanager
    def averaged(self, params):
        """Temporarily run with shadow weights."""
        backup = [p.data for p in params]
        for p, s in zip(params, self.shadow):
            p.data = s.copy()
        try:
            yield
        finally:
            for p, b in zip(params, backup):
                p.data = b

    def state(self) -> list:
        return [s.copy() for s in self.shadow]

    def load_state(self, arrays) -> None:
        if len(arrays) != len(self.shadow):
            raise ValueError("EMA state length mismatch")
        self.shadow = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
