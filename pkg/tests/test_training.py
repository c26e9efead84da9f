"""
Tests for the loss, Adam, the learning-rate schedule, augmentation, fold
plans and the training loop.
"""
import io
import math

import numpy as np
import pytest
from pydantic import ValidationError

from ..src.lanmsff.core import TrainingLog
from ..src.lanmsff.exceptions import (
    ConfigurationError,
    EmptySplitError,
    NonFiniteGradientError,
    SchemaMismatchError,
)
from ..src.lanmsff.model import LANMSFFConfig, build_model
from ..src.lanmsff.serialization import load_weights, save_weights
from ..src.lanmsff.tensor import Parameter, Tensor, check_gradients
from ..src.lanmsff.training import (
    CROP_SIZE,
    AdamState,
    TrainConfig,
    adam_step,
    augment,
    augment_split,
    cross_entropy,
    cross_entropy_from_probabilities,
    decay_epochs,
    evaluate_split,
    fit,
    hflip,
    kfold_split,
    lr_schedule,
    one_hot,
    random_crop,
    rotate,
    sample_rng,
)


def noise_split(n, num_classes, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 1, size, size)), rng.integers(0, num_classes, size=n)


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        loss = cross_entropy(Tensor(np.zeros((4, 7))), one_hot([0, 1, 2, 3], 7))

        assert loss.item() == pytest.approx(math.log(7))

    def test_confident_correct_prediction_is_near_zero(self):
        logits = np.array([[50.0, 0.0, 0.0]])

        assert cross_entropy(Tensor(logits), one_hot([0], 3)).item() == pytest.approx(0.0, abs=1e-12)

    def test_large_logits_are_stable(self):
        logits = np.array([[1000.0, -1000.0]])

        assert np.isfinite(cross_entropy(Tensor(logits), one_hot([1], 2)).item())

    def test_gradient_is_softmax_minus_targets(self, rng):
        logits = Tensor(rng.normal(size=(5, 4)))
        targets = one_hot([0, 3, 1, 1, 2], 4)

        report = check_gradients(lambda z: cross_entropy(z, targets), [logits])

        assert report.passed, report

    def test_matches_probability_form(self, rng):
        logits = rng.normal(size=(3, 6))
        targets = one_hot([5, 0, 2], 6)
        probabilities = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

        assert cross_entropy(Tensor(logits), targets).item() == pytest.approx(
            cross_entropy_from_probabilities(probabilities, targets)
        )

    def test_zero_target_row_rejected(self):
        targets = np.zeros((2, 3))
        targets[0, 1] = 1.0

        with pytest.raises(ValueError, match="degenerate"):
            cross_entropy(Tensor(np.zeros((2, 3))), targets)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(SchemaMismatchError):
            cross_entropy(Tensor(np.zeros((2, 3))), one_hot([0, 1], 4))


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        param = Parameter(Tensor([1.0, -2.0]), "w")

        adam_step([param], {"w": np.zeros(2)}, AdamState(), lr=0.001)

        np.testing.assert_array_equal(param.value.data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        param = Parameter(Tensor([1.0]), "w")
        state = adam_step([param], {"w": np.array([1.0])}, AdamState(), lr=0.001)

        assert param.value.data[0] == pytest.approx(0.999, abs=1e-8)
        assert state.t == 1

    def test_step_is_bounded(self, rng):
        """|m_hat / sqrt(v_hat)| never exceeds (1 - beta1) / sqrt(1 - beta2)."""
        param = Parameter(Tensor(np.zeros(50)), "w")
        state = AdamState()
        bound = 0.01 * 0.1 / math.sqrt(0.001)
        for _ in range(5):
            before = param.value.data.copy()
            adam_step([param], {"w": rng.normal(size=50) * 100}, state, lr=0.01)
            assert np.all(np.abs(param.value.data - before) <= bound)

    def test_converges_on_quadratic(self):
        param = Parameter(Tensor([1.0]), "theta")
        state = AdamState()
        for _ in range(200):
            adam_step([param], {"theta": 2.0 * param.value.data}, state, lr=0.05)

        assert abs(param.value.data[0]) < 0.05

    def test_nan_gradient_aborts_whole_step(self):
        good = Parameter(Tensor([1.0]), "good")
        bad = Parameter(Tensor([1.0]), "bad")
        state = AdamState()

        with pytest.raises(NonFiniteGradientError) as info:
            adam_step([good, bad], {"good": np.array([1.0]), "bad": np.array([np.nan])}, state, lr=0.1)

        assert info.value.parameter == "bad"
        assert good.value.data[0] == 1.0
        assert state.t == 0 and state.m == {}

    def test_frozen_parameter_is_skipped(self):
        frozen = Parameter(Tensor([1.0]), "frozen", trainable=False)

        adam_step([frozen], {"frozen": np.array([1.0])}, AdamState(), lr=0.1)

        assert frozen.value.data[0] == 1.0


class TestSchedule:
    @pytest.fixture
    def cfg(self):
        return TrainConfig()

    def test_decay_after_eight_stale_epochs(self, cfg):
        history = [1.0] + [1.1] * 8

        assert lr_schedule(history, 0.001, cfg) == pytest.approx(0.0005)
        assert lr_schedule(history[:-1], 0.001, cfg) == pytest.approx(0.001)

    def test_improvement_resets_the_counter(self, cfg):
        history = [1.0, 1.1, 1.1, 1.1, 0.9, 1.0, 1.0, 1.0, 1.0]

        assert decay_epochs(history, cfg) == []

    def test_two_windows_decay_twice(self, cfg):
        history = [1.0] + [1.2] * 16
        lr, seen = 0.001, []
        for epoch in range(1, len(history) + 1):
            lr = lr_schedule(history[:epoch], lr, cfg)
            seen.append(lr)

        assert lr == pytest.approx(0.001 * 0.25)
        assert decay_epochs(history, cfg) == [9, 17]
        assert all(a >= b for a, b in zip(seen, seen[1:]))

    def test_fixed_interval_reading(self):
        cfg = TrainConfig(schedule_mode="fixed_interval", patience_epochs=4)
        history = [1.0, 0.9, 0.8, 0.7, 0.8, 0.8, 0.8, 0.8, 0.6, 0.6, 0.6, 0.6]

        assert decay_epochs(history, cfg) == [8]

    def test_config_bounds(self):
        with pytest.raises(ValidationError):
            TrainConfig(decay_factor=1.5)
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)


class TestAugmentation:
    @pytest.fixture
    def image(self):
        return np.random.default_rng(5).random((1, 64, 64))

    def test_three_images_of_full_size_in_range(self, image):
        outputs = augment(image, sample_rng(0, 0))

        assert len(outputs) == 3
        for out in outputs:
            assert out.shape == (1, 64, 64)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_flip_is_an_involution(self, image):
        np.testing.assert_array_equal(hflip(hflip(image)), image)
        np.testing.assert_array_equal(hflip(image)[0, :, 0], image[0, :, -1])

    def test_zero_rotation_is_identity(self, image):
        np.testing.assert_allclose(rotate(image, 0.0), image, atol=1e-6)

    def test_crop_window_is_resized_back(self, image):
        out = random_crop(image, np.random.default_rng(0), CROP_SIZE)

        assert out.shape == image.shape

    def test_per_sample_rng_is_order_independent(self, image):
        first = augment(image, sample_rng(3, 17))
        again = augment(image, sample_rng(3, 17))

        for a, b in zip(first, again):
            np.testing.assert_array_equal(a, b)

    def test_pool_is_four_times_the_split(self):
        images, labels = noise_split(5, 3, size=64)

        pool_images, pool_labels = augment_split((images, labels), seed=1)

        assert pool_images.shape == (20, 1, 64, 64)
        np.testing.assert_array_equal(pool_labels, np.repeat(labels, 4))
        np.testing.assert_array_equal(pool_images[4], images[1])

    def test_worker_count_does_not_change_the_pool(self):
        split = noise_split(6, 3, size=64)

        serial = augment_split(split, seed=2, workers=1)
        threaded = augment_split(split, seed=2, workers=3)

        np.testing.assert_array_equal(serial[0], threaded[0])


class TestFolds:
    def test_kdef_sized_plan(self):
        plan = kfold_split(4900, k=5, seed=0)

        assert [len(f) for f in plan.folds] == [980] * 5

    def test_folds_partition_the_indices(self):
        plan = kfold_split(23, k=5, seed=1)
        joined = np.concatenate(plan.folds)

        assert sorted(joined.tolist()) == list(range(23))
        assert max(len(f) for f in plan.folds) - min(len(f) for f in plan.folds) <= 1

    def test_same_seed_same_plan(self):
        a, b = kfold_split(50, seed=4), kfold_split(50, seed=4)

        for fa, fb in zip(a.folds, b.folds):
            np.testing.assert_array_equal(fa, fb)

    def test_train_indices_complement_validation(self):
        plan = kfold_split(20, k=4, seed=0)

        train, val = plan.train_indices(2), plan.validation_indices(2)
        assert set(train).isdisjoint(val)
        assert len(train) + len(val) == 20

    def test_group_folds_keep_actors_together(self):
        groups = [f"actor{i // 10}" for i in range(100)]
        plan = kfold_split(100, k=5, seed=0, groups=groups)

        for fold in plan.folds:
            actors = {groups[i] for i in fold}
            for other in plan.folds:
                if other is not fold:
                    assert actors.isdisjoint({groups[i] for i in other})

    def test_too_few_samples(self):
        with pytest.raises(ConfigurationError):
            kfold_split(3, k=5)

    def test_single_fold_rejected(self):
        with pytest.raises(ConfigurationError, match="at least 2"):
            kfold_split(10, k=1)


class TestFit:
    @pytest.fixture
    def cfg(self):
        return TrainConfig(batch_size=8, max_epochs=2, augment=False, seed=3)

    def test_one_record_per_epoch(self, mini_model, cfg):
        train, val = noise_split(16, 3), noise_split(8, 3, seed=1)

        result = fit(mini_model, train, val, cfg, run_id="r1")

        rows = result.log.rows("r1")
        assert [r["epoch"] for r in rows] == [1, 2]
        assert all(r["lr"] == pytest.approx(cfg.lr0) for r in rows)
        assert result.best_epoch in (1, 2)
        assert result.best_val_acc == max(r["val_acc"] for r in rows)

    def test_best_weights_are_restored(self, mini_model, cfg):
        train, val = noise_split(16, 3), noise_split(8, 3, seed=1)

        result = fit(mini_model, train, val, cfg)

        _, acc = evaluate_split(mini_model, val)
        assert acc == pytest.approx(result.best_val_acc)

    def test_seeded_runs_are_identical(self, mini_config, cfg):
        train, val = noise_split(16, 3), noise_split(8, 3, seed=1)

        first = fit(build_model(mini_config), train, val, cfg).log.rows("run")
        second = fit(build_model(mini_config), train, val, cfg).log.rows("run")

        assert first == second

    def test_resumed_run_matches_uninterrupted_run(self, mini_config):
        train, val = noise_split(16, 3), noise_split(8, 3, seed=1)
        full_cfg = TrainConfig(batch_size=8, max_epochs=2, augment=False, seed=3)
        half_cfg = TrainConfig(batch_size=8, max_epochs=1, augment=False, seed=3)

        full = fit(build_model(mini_config), train, val, full_cfg).log.rows("run")

        model = build_model(mini_config)
        log = TrainingLog()
        first = fit(model, train, val, half_cfg, log=log, restore_best=False)
        fit(model, train, val, half_cfg, log=log, adam_state=first.adam_state, start_epoch=2)

        assert log.rows("run") == full

    def test_resume_from_weight_file_with_dropout(self):
        config = LANMSFFConfig(block_widths=(6, 12, 6, 12), input_size=16, num_classes=3, dropout_rate=0.25)
        train, val = noise_split(16, 3), noise_split(8, 3, seed=1)
        full_cfg = TrainConfig(batch_size=4, max_epochs=2, augment=False, seed=5)
        half_cfg = TrainConfig(batch_size=4, max_epochs=1, augment=False, seed=5)

        full = fit(build_model(config), train, val, full_cfg).log.rows("run")

        log = TrainingLog()
        interrupted = build_model(config)
        first = fit(interrupted, train, val, half_cfg, log=log, restore_best=False)
        buffer = io.BytesIO()
        save_weights(interrupted, buffer)
        buffer.seek(0)
        resumed = load_weights(buffer, config)
        fit(resumed, train, val, half_cfg, log=log, adam_state=first.adam_state, start_epoch=2)

        assert log.rows("run") == full

    def test_dropout_masks_do_not_depend_on_earlier_draws(self):
        config = LANMSFFConfig(block_widths=(6, 12, 6, 12), input_size=16, num_classes=3, dropout_rate=0.25)
        train, val = noise_split(8, 3), noise_split(4, 3, seed=1)
        cfg = TrainConfig(batch_size=4, max_epochs=1, augment=False, seed=2)
        fresh, used = build_model(config), build_model(config)
        for block in used.blocks:
            block.dropout.rng.random(100)

        a = fit(fresh, train, val, cfg).log.rows("run")
        b = fit(used, train, val, cfg).log.rows("run")

        assert a == b

    @pytest.mark.parametrize("pwfs, massatt", [(True, True), (True, False), (False, True), (False, False)])
    def test_every_ablation_trains_one_epoch(self, pwfs, massatt):
        config = LANMSFFConfig(
            block_widths=(6, 12, 6, 12), input_size=16, num_classes=3, dropout_rate=0.25,
            enable_pwfs=pwfs, enable_massatt=massatt,
        )
        model, untouched = build_model(config), build_model(config)
        cfg = TrainConfig(batch_size=4, max_epochs=1, augment=False, seed=1)

        result = fit(model, noise_split(8, 3), noise_split(4, 3, seed=1), cfg)

        rows = result.log.rows("run")
        assert len(rows) == 1
        assert all(np.isfinite(rows[0][key]) for key in ("train_loss", "val_loss"))
        assert any(
            not np.array_equal(a.value.data, b.value.data)
            for a, b in zip(model.parameters(), untouched.parameters())
        )

    def test_logs_into_database(self, mini_model, cfg, db_session):
        log = TrainingLog(session=db_session)

        fit(mini_model, noise_split(8, 3), noise_split(4, 3, seed=1), cfg, log=log, run_id="db")

        assert log.count() == 2

    def test_empty_split_rejected(self, mini_model, cfg):
        empty = (np.zeros((0, 1, 16, 16)), np.zeros(0, dtype=int))

        with pytest.raises(EmptySplitError):
            fit(mini_model, empty, noise_split(4, 3), cfg)

    def test_labels_outside_model_classes(self, mini_model, cfg):
        images, labels = noise_split(8, 3)

        with pytest.raises(SchemaMismatchError):
            fit(mini_model, (images, labels + 5), noise_split(4, 3), cfg)


@pytest.mark.slow
def test_miniature_network_memorizes_noise():
    """A small network must fit 64 random-labelled noise images."""
    config = LANMSFFConfig(block_widths=(12, 24, 12, 24), input_size=16, num_classes=3, dropout_rate=0.0)
    cfg = TrainConfig(max_epochs=200, augment=False, seed=0)
    split = noise_split(64, 3, seed=21)

    result = fit(build_model(config), split, split, cfg)

    assert max(r["train_acc"] for r in result.log.rows("run")) >= 0.95
