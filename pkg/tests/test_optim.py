"""Optimizer contracts: SAM two-phase arithmetic, decay policy, schedule
boundaries, and EMA recurrences."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mlmargin.optim import (
    Ema,
    OneCycleConfig,
    Sam,
    Sgd,
    apply_decay_policy,
    global_grad_norm,
    onecycle_lr,
    zero_grads,
)
from mlmargin.tensor import Tensor


def quadratic_closure(params, targets):
    def closure():
        total = None
        for p, t in zip(params, targets):
            term = ((p - t) * (p - t)).sum()
            total = term if total is None else total + term
        return total

    return closure


class TestSamSgd:
    def test_rho_zero_bitwise_equals_sgd_100_steps(self):
        rng = np.random.default_rng(200)
        init = [rng.normal(size=(3, 2)), rng.normal(size=4)]
        targets = [rng.normal(size=(3, 2)), rng.normal(size=4)]

        def run(opt_cls, **kw):
            params = [Tensor(a.copy(), requires_grad=True) for a in init]
            opt = opt_cls(params, momentum=0.9, weight_decay=0.01, **kw)
            closure = quadratic_closure(params, targets)
            for step in range(100):
                opt.step(closure, lr=0.01 * (1 + 0.001 * step))
            return [p.data for p in params]

        sam = run(Sam, rho=0.0)
        sgd = run(Sgd)
        for a, b in zip(sam, sgd):
            assert np.array_equal(a, b)

    def test_hand_computed_two_phase_step(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = Sam([w], rho=0.05, momentum=0.0, weight_decay=0.0)
        opt.step(lambda: (w * w).sum(), lr=0.1)
        # ascent to 1.05, gradient there 2.1, update 1 - 0.1*2.1
        assert w.data[0] == 1.0 - 0.1 * (2.0 * 1.05)
        assert_allclose(w.data[0], 0.79, atol=1e-15)

    def test_zero_gradient_is_fixed_point(self):
        w = Tensor(np.array([2.0, -1.0]), requires_grad=True)
        opt = Sam([w], rho=0.05, momentum=0.0, weight_decay=0.0)
        opt.step(lambda: (w * 0.0).sum(), lr=0.5)
        assert np.array_equal(w.data, [2.0, -1.0])

    def test_perturbation_removed_before_update(self):
        # with lr=0 the parameters must come back exactly to the start even
        # though the ascent step moved them
        rng = np.random.default_rng(201)
        start = rng.normal(size=5)
        w = Tensor(start.copy(), requires_grad=True)
        opt = Sam([w], rho=0.5, momentum=0.0)
        opt.step(lambda: (w * w).sum(), lr=0.0)
        assert np.array_equal(w.data, start)

    def test_sam_differs_from_sgd_on_asymmetric_loss(self):
        def run(opt_cls, **kw):
            w = Tensor(np.array([1.0]), requires_grad=True)
            opt = opt_cls([w], momentum=0.0, **kw)
            for _ in range(5):
                opt.step(lambda: (w * w * w * w).sum(), lr=0.01)
            return w.data[0]

        assert run(Sam, rho=0.3) != run(Sgd)

    def test_weight_decay_only_on_matrices(self):
        mat = Tensor(np.full((2, 2), 2.0), requires_grad=True)
        vec = Tensor(np.full(2, 2.0), requires_grad=True)
        opt = Sgd([mat, vec], momentum=0.0, weight_decay=0.1)
        opt.step(lambda: ((mat * 0.0).sum() + (vec * 0.0).sum()), lr=1.0)
        assert_allclose(mat.data, np.full((2, 2), 2.0 - 0.1 * 2.0), atol=1e-15)
        assert np.array_equal(vec.data, np.full(2, 2.0))

    def test_momentum_accumulates(self):
        w = Tensor(np.array([0.0]), requires_grad=True)
        opt = Sgd([w], momentum=0.5, weight_decay=0.0)
        for _ in range(2):
            opt.step(lambda: w.sum() * 3.0, lr=0.1)
        # step 1: buf=3, w=-0.3; step 2: buf=0.5*3+3=4.5, w=-0.3-0.45=-0.75
        assert_allclose(w.data, [-0.75], atol=1e-15)

    def test_negative_rho_rejected(self):
        with pytest.raises(ValueError):
            Sam([Tensor(np.ones(2), requires_grad=True)], rho=-0.1)

    def test_global_grad_norm(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones((2, 2)), requires_grad=True)
        a.grad = np.array([3.0, 0.0])
        b.grad = np.full((2, 2), 2.0)
        assert_allclose(global_grad_norm([a, b]), math.sqrt(9.0 + 16.0), atol=1e-15)
        zero_grads([a, b])
        assert global_grad_norm([a, b]) == 0.0


class TestDecayPolicy:
    def test_rank_rule(self):
        bias = Tensor(np.zeros(4), requires_grad=True)
        gain = Tensor(np.ones(1), requires_grad=True)
        matrix = Tensor(np.zeros((4, 4)), requires_grad=True)
        filt = Tensor(np.zeros((8, 3)), requires_grad=True)
        mask = apply_decay_policy([bias, gain, matrix, filt])
        assert mask == [0.0, 0.0, 1.0, 1.0]


class TestOneCycle:
    def test_boundary_values_exact(self):
        cfg = OneCycleConfig(max_lr=0.007, total_steps=200, warmup_frac=0.3)
        warmup = int(round(0.3 * 200))
        assert onecycle_lr(0, cfg) == 0.007 / 25.0
        assert onecycle_lr(warmup, cfg) == 0.007
        assert onecycle_lr(200, cfg) == 0.007 / 1e4

    def test_monotone_up_then_down(self):
        cfg = OneCycleConfig(max_lr=0.01, total_steps=100)
        warmup = int(round(0.3 * 100))
        values = [onecycle_lr(t, cfg) for t in range(101)]
        for t in range(warmup):
            assert values[t] < values[t + 1]
        for t in range(warmup, 100):
            assert values[t] > values[t + 1]

    def test_continuity_at_peak(self):
        cfg = OneCycleConfig(max_lr=0.01, total_steps=1000)
        warmup = int(round(0.3 * 1000))
        gap = abs(onecycle_lr(warmup + 1, cfg) - onecycle_lr(warmup, cfg))
        assert gap < 0.01 * 0.01  # tiny relative to max_lr

    def test_past_end_clamps(self):
        cfg = OneCycleConfig(max_lr=0.01, total_steps=50)
        assert onecycle_lr(60, cfg) == onecycle_lr(50, cfg)

    def test_degenerate_total_rejected(self):
        with pytest.raises(ValueError):
            OneCycleConfig(max_lr=0.01, total_steps=1)


class TestEma:
    def test_matches_scalar_recurrence(self):
        rng = np.random.default_rng(210)
        p = Tensor(rng.normal(size=3), requires_grad=True)
        ema = Ema([p], decay=0.9)
        shadow = p.data.copy()
        for _ in range(10):
            p.data += rng.normal(size=3)
            ema.update([p])
            shadow = 0.9 * shadow + 0.1 * p.data
            assert_allclose(ema.shadow[0], shadow, atol=1e-12)

    def test_decay_zero_tracks_live(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        ema = Ema([p], decay=0.0)
        p.data[0] = 5.0
        ema.update([p])
        assert ema.shadow[0][0] == 5.0

    def test_constant_params_geometric_gap(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        ema = Ema([p], decay=0.5)
        ema.shadow = [np.array([0.0])]
        for n in range(1, 6):
            ema.update([p])
            assert_allclose(ema.shadow[0][0], 2.0 * (1 - 0.5**n), atol=1e-12)

    def test_envelope_property(self):
        rng = np.random.default_rng(211)
        p = Tensor(rng.normal(size=4), requires_grad=True)
        ema = Ema([p], decay=0.8)
        lo, hi = p.data.copy(), p.data.copy()
        for _ in range(30):
            p.data += rng.normal(size=4)
            lo, hi = np.minimum(lo, p.data), np.maximum(hi, p.data)
            ema.update([p])
            assert np.all(ema.shadow[0] >= lo - 1e-12)
            assert np.all(ema.shadow[0] <= hi + 1e-12)

    def test_swap_restores_live_weights(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        ema = Ema([p], decay=0.5)
        p.data[:] = [redo := 7.0, 9.0]
        ema.update([p])
        live = p.data.copy()
        with ema.averaged([p]):
            assert_allclose(p.data, ema.shadow[0], atol=0)
            assert not np.array_equal(p.data, live)
        assert np.array_equal(p.data, live)

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            Ema([Tensor(np.ones(1), requires_grad=True)], decay=1.0)
