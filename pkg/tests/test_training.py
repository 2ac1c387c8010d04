import json
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import mlmargin.training as training
from mlmargin.checkpoint import load_checkpoint
from mlmargin.config import RunConfig
from mlmargin.data import MultilabelDataset
from mlmargin.model import MultilabelClassifier
from mlmargin.training import (
    EarlyStopTracker,
    TrainingError,
    early_stop_check,
    evaluate,
    predict_dataset,
    train,
)

K = 4


def toy_datasets(n_train=48, n_val=24, seed=0):
    """Learnable toy problem: class-aligned feature planes plus noise."""
    rng = np.random.default_rng(seed)

    def make(n, split):
        labels = (rng.random((n, K)) < 0.5).astype(float)
        labels[:K] = np.eye(K)  # every class occurs
        protos = np.stack([np.roll([1.0, 0, 0], j % 3) * (1 + j) for j in range(K)])
        feats = rng.normal(scale=0.3, size=(n, 3, 8, 8))
        feats += (labels @ protos).reshape(n, 3, 1, 1)
        return MultilabelDataset(feats, labels, split=split)

    return make(n_train, "train"), make(n_val, "val")


def tiny_cfg(**kw):
    base = dict(backbone_stage_widths=(6, 8), head_kind="plain", loss_kind="aam",
                optim_epochs=2, optim_batch_size=16, seed=0)
    base.update(kw)
    return RunConfig(**base)


class TestEarlyStopTracker:
    def test_strictly_improving_never_stops(self):
        t = EarlyStopTracker()
        for m in np.linspace(0.1, 0.9, 30):
            assert early_stop_check(t, m) is False
        assert t.since == 0

    def test_best_then_collapse_stops_at_patience(self):
        t = EarlyStopTracker()
        assert t.update(0.9) is False
        flags = [t.update(0.5) for _ in range(5)]
        assert flags == [False, False, False, False, True]
        # EMA of a constant best-sequence stays at the best value
        assert t.ema == pytest.approx(0.9)

    def test_flat_at_ema_value_continues(self):
        t = EarlyStopTracker()
        t.update(0.7)
        for _ in range(8):
            assert t.update(0.7) is False  # 0.7 < 0.7 is false: strict comparison

    def test_ema_matches_scalar_recurrence(self):
        rng = np.random.default_rng(3)
        metrics = rng.random(40)
        t = EarlyStopTracker(beta=0.9)
        best = -math.inf
        ema = None
        for m in metrics:
            t.update(m)
            best = max(best, m)
            ema = best if ema is None else 0.9 * ema + 0.1 * best
            assert t.best == pytest.approx(best, abs=1e-15)
            assert t.ema == pytest.approx(ema, abs=1e-12)

    def test_patience_resets_on_new_best(self):
        t = EarlyStopTracker()
        t.update(0.5)
        for _ in range(4):
            t.update(0.1)
        assert t.since == 4
        t.update(0.6)
        assert t.since == 0

    def test_non_finite_metric_rejected(self):
        t = EarlyStopTracker()
        with pytest.raises(TrainingError, match="finite"):
            t.update(float("nan"))

    def test_state_round_trip(self):
        t = EarlyStopTracker(patience=3, beta=0.8)
        for m in (0.2, 0.5, 0.4):
            t.update(m)
        again = EarlyStopTracker.from_state(t.state())
        assert again == t


class TestTrainLoop:
    def test_lr_zero_leaves_parameters_unchanged(self):
        tr, va = toy_datasets()
        cfg = tiny_cfg(optim_max_lr=0.0, optim_epochs=3)
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        before = [p.data.copy() for p in model.parameters()]
        res = train(model, tr, va)
        for p, b in zip(model.parameters(), before):
            assert_array_equal(p.data, b)
        maps = {r["val_mAP"] for r in res.log}
        assert len(maps) == 1  # constant validation metric

    def test_same_seed_identical_logs(self):
        tr, va = toy_datasets()
        logs = []
        for _ in range(2):
            cfg = tiny_cfg(optim_epochs=3)
            model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
            logs.append(train(model, tr, va).log)
        assert logs[0] == logs[1]  # bitwise float equality through dict compare

    def test_jsonl_log_layout(self, tmp_path):
        tr, va = toy_datasets()
        cfg = tiny_cfg()
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        res = train(model, tr, va, out_dir=tmp_path)
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == res.epochs_run == cfg.optim_epochs
        for i, line in enumerate(lines, start=1):
            rec = json.loads(line)
            assert list(rec) == ["epoch", "train_loss", "lr", "val_mAP",
                                 "ema_val_mAP", "stopped"]
            assert rec["epoch"] == i
            assert rec == res.log[i - 1]

    def test_training_reduces_loss_and_learns(self):
        tr, va = toy_datasets()
        cfg = tiny_cfg(optim_epochs=12, optim_max_lr=0.02)
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        base = evaluate(model, va).mean_ap
        res = train(model, tr, va)
        assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]
        assert res.best_val_map > base

    def test_non_finite_loss_aborts_naming_step(self):
        tr, va = toy_datasets()
        cfg = tiny_cfg()
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        model.bank.weights.data[0, 0] = np.nan
        with pytest.raises(TrainingError, match=r"step 0 \(epoch 1\)"):
            train(model, tr, va)

    def test_checkpoint_saved_at_best_epoch(self, tmp_path):
        tr, va = toy_datasets()
        cfg = tiny_cfg(optim_epochs=4)
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        res = train(model, tr, va, out_dir=tmp_path)
        assert res.checkpoint_path is not None
        arrays, meta = load_checkpoint(res.checkpoint_path)
        assert meta["epoch"] == res.best_epoch
        assert meta["ema_val_mAP"] == pytest.approx(res.best_ema_val_map)
        names = {n for n, _ in model.named_parameters()}
        assert names <= set(arrays)
        assert {f"ema.{n}" for n in names} <= set(arrays)
        assert {f"momentum.{n}" for n in names} <= set(arrays)
        assert meta["tracker"]["patience"] == cfg.early_stop_patience

    def test_saved_model_reproduces_scores(self, tmp_path):
        tr, va = toy_datasets()
        cfg = tiny_cfg(optim_epochs=3)
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        train(model, tr, va, out_dir=tmp_path)
        reloaded, arrays, _ = MultilabelClassifier.from_checkpoint(
            tmp_path / "checkpoint.ckpt")
        # the checkpoint stores the weights of its epoch, not the final ones;
        # it must reproduce scores when those same weights are in the live model
        model.load_state_arrays(arrays)
        assert_array_equal(reloaded.predict_scores(va.features[:5]),
                           model.predict_scores(va.features[:5]))

    def test_scripted_degradation_stops_early(self, monkeypatch):
        tr, va = toy_datasets()
        script = iter([0.9, 0.9] + [0.5, 0.5] * 10)

        class FakeReport:
            def __init__(self, v):
                self.mean_ap = v

        monkeypatch.setattr(training, "evaluate", lambda *a, **k: FakeReport(next(script)))
        cfg = tiny_cfg(optim_epochs=30, optim_max_lr=0.0)
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        res = training.train(model, tr, va)
        assert res.stopped_early
        assert res.epochs_run == 6  # best at epoch 1, patience 5 elapses at epoch 6
        assert res.log[-1]["stopped"] is True
        assert all(r["stopped"] is False for r in res.log[:-1])

    def test_early_stop_disabled_runs_all_epochs(self, monkeypatch):
        tr, va = toy_datasets()
        script = iter([0.9, 0.9] + [0.5, 0.5] * 20)

        class FakeReport:
            def __init__(self, v):
                self.mean_ap = v

        monkeypatch.setattr(training, "evaluate", lambda *a, **k: FakeReport(next(script)))
        cfg = tiny_cfg(optim_epochs=8, optim_max_lr=0.0, early_stop_enabled=False)
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        res = training.train(model, tr, va)
        assert not res.stopped_early
        assert res.epochs_run == 8

    def test_class_count_mismatch_rejected(self):
        tr, va = toy_datasets()
        cfg = tiny_cfg()
        model = MultilabelClassifier(cfg, K + 1, np.random.default_rng(0))
        with pytest.raises(TrainingError, match="classes"):
            train(model, tr, va)


class TestPredictionHelpers:
    def test_predict_dataset_matches_single_batch(self):
        tr, _ = toy_datasets()
        cfg = tiny_cfg()
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        whole = model.predict_proba(tr.features)
        chunked = predict_dataset(model, tr, batch_size=7)
        assert_allclose(chunked, whole, atol=1e-12)

    def test_evaluate_returns_full_report(self):
        tr, _ = toy_datasets()
        cfg = tiny_cfg()
        model = MultilabelClassifier(cfg, K, np.random.default_rng(cfg.seed))
        rep = evaluate(model, tr)
        d = rep.to_dict()
        for key in ("mAP", "OP", "OR", "OF1", "CP", "CR", "CF1"):
            assert 0.0 <= d[key] <= 1.0
