"""Tests for the loss, schedule, optimizer, and the supervised loop.

Closed-form oracles: cross-entropy of symmetric logits is ln 2, two
momentum steps under a constant gradient displace by 2.9 * lr * g.
"""

import importlib
import math

import numpy as np
import pytest

from bolf.model import ModelConfig, init_params
from bolf.tensor import Tape, Tensor, backward, grad_check
from bolf.train import (
    EpochStats,
    MomentumSGD,
    NonFiniteLoss,
    TrainConfig,
    cosine_lr,
    cross_entropy,
    evaluate,
    fake_score,
    score_samples,
    train,
    _shuffled_order,
)


class TestCrossEntropy:
    def test_symmetric_logits_give_ln2(self):
        assert cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(
            0.6931471805599453, abs=1e-15)

    def test_hand_computed_value(self):
        # -log(e^2 / (e^1 + e^2)) = log(1 + e^-1)
        assert cross_entropy(Tensor([1.0, 2.0]), 1).item() == pytest.approx(
            0.31326168751822286, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([0.0, 0.0]), 2)
        with pytest.raises(ValueError):
            cross_entropy(Tensor([0.0, 0.0]), -1)

    def test_shift_invariance(self):
        logits = np.array([0.3, -1.2, 2.0])
        a = cross_entropy(Tensor(logits), 1).item()
        b = cross_entropy(Tensor(logits + 300.0), 1).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_extreme_logits_stay_finite(self):
        assert cross_entropy(Tensor([1000.0, 0.0]), 0).item() == pytest.approx(0.0)
        assert cross_entropy(Tensor([1000.0, 0.0]), 1).item() == pytest.approx(1000.0)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor([0.5, -0.3, 1.1], requires_grad=True)
        with Tape() as tape:
            loss = cross_entropy(logits, 2)
        backward(loss, tape)
        e = np.exp(logits.data - logits.data.max())
        want = e / e.sum() - np.array([0.0, 0.0, 1.0])
        assert np.allclose(logits.grad, want, atol=1e-12)

    def test_gradient_against_central_differences(self):
        x0 = np.random.default_rng(0).normal(size=(4,))
        assert grad_check(lambda t: cross_entropy(t, 1), x0).passed


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 0.4) == pytest.approx(0.4)
        assert cosine_lr(100, 100, 0.4) == pytest.approx(0.0)
        assert cosine_lr(50, 100, 0.4, lr_min=0.1) == pytest.approx(0.25)
        assert cosine_lr(100, 100, 0.4, lr_min=0.1) == pytest.approx(0.1)

    def test_monotone_decrease(self):
        values = [cosine_lr(t, 40, 0.1) for t in range(41)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_validation(self):
        with pytest.raises(ValueError):
            cosine_lr(5, 0, 0.1)
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 0.1)
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.1)


class TestMomentumSGD:
    def _param(self, value=1.0):
        return Tensor(np.array([value]), requires_grad=True)

    def test_two_step_displacement_oracle(self):
        # v1 = g, v2 = (1 + m) g; total displacement = (2 + m) lr g
        p = self._param(0.0)
        opt = MomentumSGD([p], momentum=0.9)
        for _ in range(2):
            p.grad = np.array([2.0])
            opt.step(0.1)
        assert p.data[0] == pytest.approx(-2.9 * 0.1 * 2.0, abs=1e-15)

    def test_velocity_matches_geometric_recursion(self):
        m, lr, g = 0.7, 0.05, 3.0
        p = self._param(0.0)
        opt = MomentumSGD([p], momentum=m)
        expect, v = 0.0, 0.0
        for _ in range(6):
            p.grad = np.array([g])
            opt.step(lr)
            v = m * v + g
            expect -= lr * v
        assert p.data[0] == pytest.approx(expect, abs=1e-14)

    def test_zero_momentum_is_plain_sgd(self):
        p = self._param(5.0)
        opt = MomentumSGD([p], momentum=0.0)
        p.grad = np.array([10.0])
        opt.step(0.01)
        assert p.data[0] == pytest.approx(4.9)

    def test_missing_gradient_rejected(self):
        p = self._param()
        opt = MomentumSGD([p])
        with pytest.raises(ValueError):
            opt.step(0.1)

    def test_gradients_cleared_and_step_counted(self):
        p = self._param()
        opt = MomentumSGD([p])
        p.grad = np.array([1.0])
        opt.step(0.1)
        assert p.grad is None
        assert opt.t == 1

    def test_weight_decay_shrinks_parameters(self):
        p = self._param(2.0)
        opt = MomentumSGD([p], momentum=0.0, weight_decay=0.1)
        p.grad = np.array([0.0])
        opt.step(0.5)
        # effective gradient is wd * p
        assert p.data[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)

    def test_clip_norm_rescales_global_gradient(self):
        a, b = self._param(0.0), self._param(0.0)
        opt = MomentumSGD([a, b], momentum=0.0, clip_norm=1.0)
        a.grad, b.grad = np.array([3.0]), np.array([4.0])  # norm 5
        opt.step(1.0)
        assert a.data[0] == pytest.approx(-0.6)
        assert b.data[0] == pytest.approx(-0.8)

    def test_clip_norm_leaves_small_gradients_alone(self):
        p = self._param(0.0)
        opt = MomentumSGD([p], momentum=0.0, clip_norm=10.0)
        p.grad = np.array([1.0])
        opt.step(1.0)
        assert p.data[0] == pytest.approx(-1.0)


class TestTrainConfigValidation:
    def test_defaults_are_valid(self):
        cfg = TrainConfig()
        assert cfg.epochs == 20
        assert cfg.batch_size == 8

    @pytest.mark.parametrize("kwargs", [
        {"lr0": 0.0},
        {"lr0": 0.1, "lr_min": 0.2},
        {"momentum": 1.0},
        {"momentum": -0.1},
        {"batch_size": 0},
        {"epochs": -1},
        {"eval_every": 0},
        {"weight_decay": -0.01},
    ])
    def test_invalid_settings_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestScoring:
    def test_fake_score_is_softmax_of_class_one(self):
        assert fake_score(Tensor([math.log(1.0), math.log(3.0)])) == pytest.approx(0.75)
        assert fake_score(Tensor([50.0, -50.0])) < 1e-6
        assert fake_score(Tensor([-50.0, 50.0])) > 1.0 - 1e-6

    def test_score_samples_preserves_order_and_ids(self, tiny_splits, tiny_model_cfg):
        params = init_params(tiny_model_cfg, seed=0)
        scored = score_samples(params, tiny_splits.val, tiny_model_cfg)
        assert len(scored) == len(tiny_splits.val)
        for s, original in zip(scored, tiny_splits.val):
            assert s.label == original.label
            assert s.video_id == original.video_id
            assert 0.0 <= s.score <= 1.0

    def test_evaluate_matches_metrics_pipeline(self, tiny_splits, tiny_model_cfg):
        from bolf.metrics import accuracy, roc_auc
        params = init_params(tiny_model_cfg, seed=0)
        acc, auc = evaluate(params, tiny_splits.val, tiny_model_cfg)
        scored = score_samples(params, tiny_splits.val, tiny_model_cfg)
        assert acc == accuracy(scored)
        assert auc == roc_auc(scored)


class TestShuffledOrder:
    def test_paired_set_keeps_pairs_adjacent(self, tiny_splits):
        samples = tiny_splits.train
        order = _shuffled_order(samples, np.random.default_rng(0))
        assert sorted(order) == list(range(len(samples)))
        for i in range(0, len(order), 2):
            a, b = samples[order[i]], samples[order[i + 1]]
            assert {a.label, b.label} == {0, 1}
            fake = a if a.label == 1 else b
            real = b if a.label == 1 else a
            assert fake.video_id == real.video_id + "-f"
            assert fake.frame_idx == real.frame_idx

    def test_pair_order_varies_with_rng(self, tiny_splits):
        samples = tiny_splits.train
        a = _shuffled_order(samples, np.random.default_rng(1))
        b = _shuffled_order(samples, np.random.default_rng(2))
        assert not np.array_equal(a, b)

    def test_unpaired_balanced_set_interleaves_labels(self):
        from bolf.data import ImageSample
        img = np.zeros((2, 2, 1))
        samples = [ImageSample(img, i % 2, f"v{i}", 0) for i in range(10)]
        order = _shuffled_order(samples, np.random.default_rng(3))
        for i in range(0, 10, 2):
            labels = {samples[order[i]].label, samples[order[i + 1]].label}
            assert labels == {0, 1}

    def test_unbalanced_set_is_plain_permutation(self):
        from bolf.data import ImageSample
        img = np.zeros((2, 2, 1))
        samples = [ImageSample(img, 0, f"v{i}", 0) for i in range(4)]
        samples.append(ImageSample(img, 1, "w-f", 0))
        order = _shuffled_order(samples, np.random.default_rng(4))
        assert sorted(order) == list(range(5))


class TestTrainLoop:
    @pytest.fixture()
    def quick_cfg(self):
        return TrainConfig(epochs=2, batch_size=4, lr0=0.05, seed=0)

    def test_zero_epochs_returns_input_unchanged(self, tiny_splits, tiny_model_cfg):
        params = init_params(tiny_model_cfg, seed=0)
        out, history = train(params, tiny_splits, TrainConfig(epochs=0), tiny_model_cfg)
        assert out is params
        assert history == []

    def test_empty_split_rejected(self, tiny_splits, tiny_model_cfg, quick_cfg):
        from bolf.data import DatasetSplits
        empty = DatasetSplits(spec=tiny_splits.spec, train=[], val=tiny_splits.val)
        params = init_params(tiny_model_cfg, seed=0)
        with pytest.raises(ValueError):
            train(params, empty, quick_cfg, tiny_model_cfg)

    def test_history_shape_and_lr_decay(self, tiny_splits, tiny_model_cfg, quick_cfg):
        params = init_params(tiny_model_cfg, seed=0)
        _, history = train(params, tiny_splits, quick_cfg, tiny_model_cfg)
        assert len(history) == quick_cfg.epochs
        assert [h.epoch for h in history] == [0, 1]
        for h in history:
            assert isinstance(h, EpochStats)
            assert math.isfinite(h.mean_loss)
            assert 0.0 <= h.train_acc <= 1.0
            assert 0.0 < h.lr <= quick_cfg.lr0
        assert history[1].lr < history[0].lr

    def test_eval_every_skips_intermediate_epochs(self, tiny_splits, tiny_model_cfg):
        cfg = TrainConfig(epochs=3, batch_size=4, eval_every=3, seed=0)
        params = init_params(tiny_model_cfg, seed=0)
        _, history = train(params, tiny_splits, cfg, tiny_model_cfg)
        assert history[0].val_acc is None and history[0].val_auc is None
        assert history[1].val_acc is None
        # final epoch always evaluates
        assert history[2].val_acc is not None and history[2].val_auc is not None

    def test_training_is_deterministic(self, tiny_splits, tiny_model_cfg, quick_cfg):
        runs = []
        for _ in range(2):
            params = init_params(tiny_model_cfg, seed=0)
            params, history = train(params, tiny_splits, quick_cfg, tiny_model_cfg)
            runs.append(({n: t.data.copy() for n, t in params.named()}, history))
        (wa, ha), (wb, hb) = runs
        assert ha == hb
        for name in wa:
            assert np.array_equal(wa[name], wb[name])

    def test_training_moves_parameters(self, tiny_splits, tiny_model_cfg, quick_cfg):
        params = init_params(tiny_model_cfg, seed=0)
        before = params.patch_w.data.copy()
        train(params, tiny_splits, quick_cfg, tiny_model_cfg)
        assert not np.array_equal(before, params.patch_w.data)

    def test_non_finite_loss_is_reported(self, tiny_splits, tiny_model_cfg,
                                         quick_cfg, monkeypatch):
        # fault injection: force an infinite loss and check it surfaces as
        # NonFiniteLoss with context, not as a silent divergence
        train_module = importlib.import_module("bolf.train")
        monkeypatch.setattr(train_module, "cross_entropy",
                            lambda logits, label: Tensor(float("inf")))
        params = init_params(tiny_model_cfg, seed=0)
        with pytest.raises(NonFiniteLoss, match="epoch 0"):
            train(params, tiny_splits, quick_cfg, tiny_model_cfg)
