"""Losses, parameter grouping, and the training loop contract."""

import math

import numpy as np
import pytest

import slicegate.numerics as N
from slicegate.adapter import TemporalModel
from slicegate.data import build_sample_index, load_split, sample_batch
from slicegate.errors import ConfigError, NumericError
from slicegate.model import BaselineModel
from slicegate.numerics import AdamW, Tensor, grad_check
from slicegate.training import (
    CheckpointRecord,
    TrainConfig,
    bce_loss,
    dice_loss,
    fill_missing_grads,
    make_param_groups,
    select_best,
    total_loss,
    train,
)


class TestDiceLoss:
    def test_perfect_prediction_near_zero(self):
        t = np.zeros((4, 4))
        t[1:3, 1:3] = 1.0
        loss = dice_loss(Tensor(t.copy()), t)
        assert float(loss.data) < 1e-6

    def test_inverted_prediction_near_one(self):
        t = np.zeros((4, 4))
        t[1:3, 1:3] = 1.0
        loss = dice_loss(Tensor(1.0 - t), t)
        assert float(loss.data) > 1.0 - 1e-5

    def test_hand_evaluated_empty_target(self):
        # sum(p) = 2 over 4 pixels at 0.5: 1 - s/(2+s) ~ 1 - 5e-7
        probs = Tensor(np.full((2, 2), 0.5))
        loss = float(dice_loss(probs, np.zeros((2, 2))).data)
        assert loss == pytest.approx(1.0 - 5e-7, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(NumericError):
            dice_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        t = (rng.random((3, 3)) > 0.5).astype(np.float64)
        x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        res = grad_check(lambda z: dice_loss(N.sigmoid(z), t), [x])
        assert res.passed, res.max_rel_error


class TestBceLoss:
    def test_zero_logit_is_ln2(self):
        loss = bce_loss(Tensor(np.zeros((5, 5))), np.zeros((5, 5)))
        assert float(loss.data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_correct_logit_no_overflow(self):
        loss = bce_loss(Tensor(np.full((2, 2), 20.0)), np.ones((2, 2)))
        assert float(loss.data) < 1e-8

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        t = (rng.random((4, 4)) > 0.5).astype(np.float64)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        res = grad_check(lambda z: bce_loss(z, t), [x])
        assert res.passed, res.max_rel_error

    def test_shape_mismatch(self):
        with pytest.raises(NumericError):
            bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))


class TestTotalLoss:
    def test_lambda_zero_is_bce_plus_dice(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.standard_normal((4, 4)))
        target = (rng.random((4, 4)) > 0.5).astype(np.float64)
        loss, comps = total_loss(logits, target, Tensor(np.asarray(0.2)), lambda_gate=0.0)
        expected = float(bce_loss(logits, target).data) + float(
            dice_loss(N.sigmoid(logits), target).data)
        assert float(loss.data) == pytest.approx(expected, rel=1e-12)

    def test_perfect_prediction_decisive_gate_near_zero(self):
        t = np.zeros((4, 4))
        t[0, 0] = 1.0
        logits = Tensor(np.where(t > 0, 30.0, -30.0))
        loss, _ = total_loss(logits, t, Tensor(np.asarray(0.0)), lambda_gate=0.001)
        assert float(loss.data) < 1e-6

    def test_half_gate_adds_lambda_quarter(self):
        logits = Tensor(np.zeros((2, 2)))
        target = np.zeros((2, 2))
        base, _ = total_loss(logits, target, None, lambda_gate=0.001)
        with_pen, comps = total_loss(logits, target, Tensor(np.asarray(0.25)),
                                     lambda_gate=0.001)
        assert float(with_pen.data) - float(base.data) == pytest.approx(2.5e-4, abs=1e-12)
        assert comps["penalty"] == 0.25


class TestParamGroups:
    def test_temporal_has_three_groups_with_paper_ratios(self, small64_config):
        model = TemporalModel(small64_config, seed=0)
        config = TrainConfig()
        groups = {g.name: g for g in make_param_groups(model, config)}
        assert set(groups) == {"encoder", "decoder", "adapter"}
        assert groups["adapter"].learning_rate == pytest.approx(5e-5 * 100)
        assert groups["decoder"].learning_rate == pytest.approx(1e-5 * 100)
        assert groups["encoder"].learning_rate == pytest.approx(1e-6 * 100)
        gate = model.params["adapter.b_g"]
        assert any(p is gate for p in groups["adapter"].parameters)

    def test_baseline_has_two_groups(self, small64_config):
        model = BaselineModel(small64_config, seed=0)
        groups = make_param_groups(model, TrainConfig(model_kind="baseline"))
        assert {g.name for g in groups} == {"encoder", "decoder"}

    def test_census_sums_to_total(self, small64_config):
        model = TemporalModel(small64_config, seed=0)
        groups = make_param_groups(model, TrainConfig())
        assert sum(p.data.size for g in groups for p in g.parameters) == \
            model.store.total_count()

    def test_unprefixed_parameter_rejected(self, small64_config):
        model = BaselineModel(small64_config, seed=0)
        model.store.add("stray.w", np.zeros(3))
        with pytest.raises(ConfigError):
            make_param_groups(model, TrainConfig(model_kind="baseline"))


class TestConfigAndSelection:
    def test_lr_ordering_enforced(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_encoder=1e-4, lr_decoder=1e-5)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(lambda_gate=-0.1)

    def test_best_checkpoint_tiebreak_earliest(self, tmp_path):
        records = [CheckpointRecord(i, v, tmp_path / f"{i}.ckpt")
                   for i, v in enumerate([0.3, 0.5, 0.5, 0.4])]
        assert select_best(records).epoch == 1


class TestInertAdapterTrajectory:
    def test_clamped_temporal_matches_baseline_losses(self, small64_config, smoke_dataset):
        # lambda = 0 and a hard-zero gate: ten training steps must match the
        # baseline's loss trajectory within float32 accumulation noise.
        losses = {}
        for kind, clamp in (("baseline", False), ("temporal", True)):
            config = TrainConfig(model_kind=kind, gate_clamp_zero=clamp,
                                 lambda_gate=0.0, seed=3)
            from slicegate.training import build_model
            model = build_model(config, small64_config)
            volumes = load_split(smoke_dataset, "train")
            index = build_sample_index(list(volumes), seed=9)
            optimizer = AdamW(make_param_groups(model, config))
            sampler = np.random.default_rng(5)
            droppath = np.random.default_rng(6)
            trace = []
            for _ in range(10):
                stacks = sample_batch(index, volumes, 4, sampler)
                targets = np.stack([s.target_mask for s in stacks]).astype(np.float32)
                ids = np.array([model.prompt_table.class_id(s.class_name) for s in stacks])
                if kind == "temporal":
                    logits, _, penalty = model.forward_batch(
                        np.stack([s.slices for s in stacks]), ids,
                        training=True, rng=droppath)
                else:
                    logits = model.forward_batch(
                        np.stack([s.slices[2] for s in stacks]), ids)
                    penalty = None
                loss, _ = total_loss(logits, targets, penalty, 0.0)
                optimizer.zero_grad()
                loss.backward()
                if clamp:
                    fill_missing_grads(optimizer.groups)
                optimizer.step()
                trace.append(float(loss.data))
            losses[kind] = trace
        for a, b in zip(losses["baseline"], losses["temporal"]):
            assert abs(a - b) <= 1e-4, (losses["baseline"], losses["temporal"])


@pytest.fixture(scope="module")
def smoke_run(smoke_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    config = TrainConfig(model_kind="baseline", epochs=3, steps_per_epoch=8,
                         batch_size=4, seed=11)
    from tests.conftest import SMALL64
    result = train(config, smoke_dataset, out, model_config=SMALL64)
    return config, out, result


class TestTrainLoop:
    def test_metrics_log_written_and_loss_decreases(self, smoke_run):
        _, _, result = smoke_run
        lines = result.metrics_path.read_text().strip().splitlines()
        header = lines[0].split(",")
        first = dict(zip(header, lines[1].split(",")))
        last = dict(zip(header, lines[-1].split(",")))
        assert float(last["loss_total"]) < float(first["loss_total"])

    def test_best_checkpoint_recorded(self, smoke_run):
        _, _, result = smoke_run
        assert result.best.path.exists()
        assert 0.0 <= result.best.val_mean_dice <= 1.0

    def test_gradient_flow_audit(self, smoke_dataset, small64_config):
        # one positive batch: every group must move at least one parameter
        config = TrainConfig(model_kind="temporal", seed=4)
        from slicegate.training import build_model
        model = build_model(config, small64_config)
        volumes = load_split(smoke_dataset, "train")
        index = build_sample_index(list(volumes), seed=1)
        groups = make_param_groups(model, config)
        optimizer = AdamW(groups)
        positives = [e for e in index.entries if not e.is_negative][:4]
        stacks = [volumes.stack(e) for e in positives]
        targets = np.stack([s.target_mask for s in stacks]).astype(np.float32)
        ids = np.array([model.prompt_table.class_id(s.class_name) for s in stacks])
        before = {g.name: [p.data.copy() for p in g.parameters] for g in groups}
        logits, _, penalty = model.forward_batch(
            np.stack([s.slices for s in stacks]), ids,
            training=True, rng=np.random.default_rng(0))
        loss, _ = total_loss(logits, targets, penalty, 0.001)
        optimizer.zero_grad()
        loss.backward()
        for g in groups:
            live = any(p.grad is not None and np.abs(p.grad).max() > 0
                       for p in g.parameters)
            assert live, f"no gradient reached group {g.name}"
        optimizer.step()
        for g in groups:
            moved = any(not np.array_equal(p.data, old)
                        for p, old in zip(g.parameters, before[g.name]))
            assert moved, f"no parameter moved in group {g.name}"

    def test_reruns_are_byte_identical(self, smoke_dataset, tmp_path, small64_config):
        config = TrainConfig(model_kind="temporal", epochs=2, steps_per_epoch=4,
                             batch_size=4, seed=21)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        ra = train(config, smoke_dataset, out_a, model_config=small64_config)
        rb = train(config, smoke_dataset, out_b, model_config=small64_config)
        assert ra.metrics_path.read_bytes() == rb.metrics_path.read_bytes()
        assert ra.best.path.read_bytes() == rb.best.path.read_bytes()
