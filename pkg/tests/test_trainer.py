"""
Training loop: determinism, checkpoints, divergence handling and data splits
"""
from unittest.mock import patch

import numpy as np
import pytest

from nearquery.config import PhantomSpec
from nearquery.exceptions import ConfigError, DatasetError, TrainingDivergedError
from nearquery.harness.checkpoint import load_checkpoint
from nearquery.harness.trainer import (
    FINAL_CHECKPOINT,
    LAST_GOOD_CHECKPOINT,
    LOG_COLUMNS,
    batch_schedule,
    evaluate_model,
    model_from_checkpoint,
    split_ids,
    train,
)
from nearquery.lossmatch import total_loss as real_total_loss
from nearquery.model.segmodel import SegModel
from nearquery.phantom import PhantomDataset, gen_phantom
from nearquery.utils.csvlog import read_rows
from tests.conftest import TINY_CLASSES, micro_config


class TestSchedule:
    def test_split_takes_manifest_tail(self):
        train_ids, val_ids = split_ids(["a", "b", "c", "d", "e"], 0.3)
        assert train_ids == ["a", "b", "c"]
        assert val_ids == ["d", "e"]

    def test_no_split(self):
        assert split_ids(["a", "b"], 0.0) == (["a", "b"], [])

    def test_each_epoch_is_a_permutation(self):
        batches = list(batch_schedule(5, 2, 5, seed=1))
        flat = [i for b in batches for i in b]
        assert all(len(b) == 2 for b in batches)
        assert sorted(flat[:5]) == [0, 1, 2, 3, 4]
        assert sorted(flat[5:10]) == [0, 1, 2, 3, 4]

    def test_schedule_is_seeded(self):
        assert list(batch_schedule(7, 3, 4, seed=2)) == list(batch_schedule(7, 3, 4, seed=2))
        assert list(batch_schedule(7, 3, 4, seed=2)) != list(batch_schedule(7, 3, 4, seed=3))

    def test_batch_larger_than_dataset_wraps(self):
        assert sorted(next(batch_schedule(2, 4, 1, seed=0))) == [0, 0, 1, 1]


class TestTrain:
    def test_single_step_moves_parameters(self, tmp_path, tiny_dataset, train_cfg):
        cfg = train_cfg.model_copy(update={"steps": 1})
        model = SegModel(cfg.model)
        before = {name: p.data.copy() for name, p in model.named_parameters()}
        result = train(cfg, tiny_dataset, tmp_path / "run", model=model)
        moved = [name for name, p in model.named_parameters() if not np.array_equal(p.data, before[name])]
        assert moved
        assert np.isfinite(result.last_loss)
        assert result.checkpoint_path.name == FINAL_CHECKPOINT

    def test_same_seed_same_log(self, tmp_path, tiny_dataset, train_cfg):
        first = train(train_cfg, tiny_dataset, tmp_path / "a")
        second = train(train_cfg, tiny_dataset, tmp_path / "b")
        assert first.log_path.read_bytes() == second.log_path.read_bytes()
        assert first.checkpoint_path.read_bytes() == second.checkpoint_path.read_bytes()

    def test_log_rows(self, tmp_path, tiny_dataset, train_cfg):
        result = train(train_cfg, tiny_dataset, tmp_path / "run")
        rows = read_rows(result.log_path)
        assert list(rows[0]) == LOG_COLUMNS
        assert [r["step"] for r in rows] == ["1", "2"]
        assert all(r["val_mDice"] != "" for r in rows)
        assert rows[0]["loss_bls_a"] == "0.0"

    def test_reloaded_checkpoint_scores_like_trained_model(self, tmp_path, tiny_dataset, train_cfg):
        result = train(train_cfg, tiny_dataset, tmp_path / "run")
        model, ckpt = model_from_checkpoint(result.checkpoint_path)
        assert ckpt.meta["step"] == train_cfg.steps
        assert ckpt.has_optimizer
        reloaded = evaluate_model(model, PhantomDataset(tiny_dataset))
        assert reloaded.m_dice == result.final_metrics.m_dice

    def test_validation_split_reported(self, tmp_path, tiny_dataset, train_cfg):
        cfg = train_cfg.model_copy(update={"val_fraction": 0.25})
        result = train(cfg, tiny_dataset, tmp_path / "run")
        assert result.val_ids == ["00003"]
        assert result.final_metrics.n_images == 1

    def test_divergence_keeps_last_good(self, tmp_path, tiny_dataset, train_cfg):
        cfg = train_cfg.model_copy(update={"steps": 3})
        model = SegModel(cfg.model)
        initial = {name: p.data.copy() for name, p in model.named_parameters()}
        calls = {"n": 0}

        def flaky(outputs, targets, weights):
            calls["n"] += 1
            loss, breakdown = real_total_loss(outputs, targets, weights)
            if calls["n"] > cfg.batch_size:
                return loss * float("nan"), breakdown
            return loss, breakdown

        with patch("nearquery.harness.trainer.total_loss", side_effect=flaky):
            with pytest.raises(TrainingDivergedError) as exc_info:
                train(cfg, tiny_dataset, tmp_path / "run", model=model)

        assert exc_info.value.step == 2
        ckpt = load_checkpoint(tmp_path / "run" / LAST_GOOD_CHECKPOINT)
        assert ckpt.meta["step"] == 0
        for name, value in initial.items():
            np.testing.assert_array_equal(ckpt.tensors[name], value)
        assert not (tmp_path / "run" / FINAL_CHECKPOINT).exists()

    def test_class_count_mismatch(self, tmp_path, tiny_dataset, train_cfg):
        cfg = train_cfg.model_copy(update={"model": micro_config(n_classes=5, n_queries=5)})
        with pytest.raises(ConfigError):
            train(cfg, tiny_dataset, tmp_path / "run")

    def test_empty_dataset(self, tmp_path, train_cfg):
        root = tmp_path / "empty"
        gen_phantom(PhantomSpec(image_size=64, classes=TINY_CLASSES, n=0), root)
        with pytest.raises(DatasetError):
            train(train_cfg, root, tmp_path / "run")

    def test_split_leaving_nothing_to_train(self, tmp_path, train_cfg):
        root = tmp_path / "one"
        gen_phantom(PhantomSpec(image_size=64, classes=TINY_CLASSES, n=1), root)
        cfg = train_cfg.model_copy(update={"val_fraction": 0.5})
        with pytest.raises(DatasetError):
            train(cfg, root, tmp_path / "run")

    @pytest.mark.slow
    def test_overfits_single_sample(self, tmp_path):
        from nearquery.config import TrainConfig

        root = tmp_path / "single"
        gen_phantom(PhantomSpec(image_size=64, classes=TINY_CLASSES, n=1, seed=4, presence_prob=1.0), root)
        cfg = TrainConfig(
            steps=150,
            batch_size=1,
            lr=3e-3,
            eval_interval=150,
            seed=1,
            model=micro_config(d_model=16, n_queries=5),
        )
        result = train(cfg, root, tmp_path / "run")
        losses = [float(r["loss_total"]) for r in read_rows(result.log_path)]
        assert losses[-1] < 0.5 * losses[0]

    @pytest.mark.slow
    def test_overfits_sixteen_phantoms(self, tmp_path):
        from nearquery.config import ModelConfig, TrainConfig

        root = tmp_path / "phantoms16"
        manifest = gen_phantom(PhantomSpec(n=16, seed=0), root)
        assert len(manifest.class_names) == 6
        assert manifest.class_tiers.count("small") == 2
        cfg = TrainConfig(
            steps=500,
            batch_size=2,
            lr=1e-3,
            eval_interval=50,
            val_fraction=0.0,
            model=ModelConfig(d_model=64, n_queries=20),
        )
        result = train(cfg, root, tmp_path / "run")
        assert result.steps <= 500
        assert result.val_ids == []
        assert result.final_metrics.m_dice >= 0.90
