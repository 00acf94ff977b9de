"""
Ablation grid runner
"""
import math

import pytest

from nearquery.config import AblationEntry, TrainConfig, apply_overrides
from nearquery.harness.ablation import ABLATION_COLUMNS, ABLATION_CSV, DEFAULT_GRID, ablate, entry_config, resolve_grid
from nearquery.utils.csvlog import read_rows


class TestGrid:
    def test_default_grid_order(self):
        assert [e.name for e in DEFAULT_GRID] == [
            "naive",
            "trick",
            "trick+OA(S1)",
            "trick+FF(inside)",
            "trick+FF(late)",
            "trick+Sigmoid*2+BLS",
            "trick+Sigmoid*2+BLS(2)",
            "trick+Sigmoid*2+FF+BLS(2)",
        ]

    def test_named_grid_lookup(self):
        assert resolve_grid("default") == DEFAULT_GRID
        with pytest.raises(KeyError):
            resolve_grid("nope")

    def test_empty_grid_rejected(self, tmp_path, tiny_dataset, train_cfg):
        with pytest.raises(ValueError):
            ablate(tiny_dataset, [], tmp_path, base=train_cfg)

    def test_rows_ignore_ablated_settings_of_the_base(self, train_cfg):
        base = apply_overrides(
            TrainConfig,
            train_cfg.model_dump(mode="json"),
            {
                "preprocess_trick": False,
                "model.bls_mode": "two",
                "model.fusion.position": "late",
                "model.offset_head_depth": 3,
                "model.offset.strategy": "squash",
                "model.offset.squash_kind": "softmax_sign",
                "model.offset.scale_c": 7.0,
            },
        )
        configs = {e.name: entry_config(e, base) for e in DEFAULT_GRID}

        naive = configs["naive"]
        assert naive.preprocess_trick is False
        assert naive.model.offset_head_depth == 1
        assert naive.model.offset.strategy == "none"
        assert naive.model.fusion.position == "none"
        assert naive.model.bls_mode == "off"

        trick = configs["trick"]
        assert trick.preprocess_trick is True
        assert (trick.model.fusion.position, trick.model.bls_mode) == ("none", "off")

        assert configs["trick+OA(S1)"].model.offset.strategy == "clip_divide"
        assert configs["trick+OA(S1)"].model.bls_mode == "off"
        assert configs["trick+FF(inside)"].model.fusion.position == "inside"
        squash = configs["trick+Sigmoid*2+BLS"].model
        assert (squash.offset.squash_kind, squash.offset.scale_c, squash.bls_mode) == ("sigmoid_symmetric", 2.0, "one")
        assert squash.fusion.position == "none"
        assert all(cfg.preprocess_trick for name, cfg in configs.items() if name != "naive")

    def test_rows_keep_non_ablated_base_settings(self, train_cfg):
        cfg = entry_config(DEFAULT_GRID[0], train_cfg)
        assert cfg.steps == train_cfg.steps
        assert cfg.model.d_model == train_cfg.model.d_model


class TestAblate:
    def test_one_entry_one_row(self, tmp_path, tiny_dataset, train_cfg):
        path = ablate(tiny_dataset, [DEFAULT_GRID[1]], tmp_path / "abl", base=train_cfg)
        assert path.name == ABLATION_CSV
        rows = read_rows(path)
        assert len(rows) == 1
        assert list(rows[0]) == ABLATION_COLUMNS
        assert rows[0]["config"] == "trick"
        assert rows[0]["status"] == "ok"
        assert 0.0 <= float(rows[0]["mDice"]) <= 1.0

    def test_failing_entry_does_not_stop_the_grid(self, tmp_path, tiny_dataset, train_cfg):
        grid = [
            AblationEntry(name="bad_classes", overrides={"model.n_classes": 5, "model.n_queries": 5}),
            AblationEntry(name="bad_path", overrides={"model.no_such_field": 1}),
            AblationEntry(name="fine", overrides={}),
        ]
        rows = read_rows(ablate(tiny_dataset, grid, tmp_path / "abl", base=train_cfg))
        assert [r["status"] for r in rows] == ["failed", "failed", "ok"]
        assert math.isnan(float(rows[0]["mDice"]))

    def test_untimed_runs_are_byte_identical(self, tmp_path, tiny_dataset, train_cfg):
        grid = [DEFAULT_GRID[0], DEFAULT_GRID[2]]
        first = ablate(tiny_dataset, grid, tmp_path / "a", base=train_cfg, timing=False)
        second = ablate(tiny_dataset, grid, tmp_path / "b", base=train_cfg, timing=False)
        assert first.read_bytes() == second.read_bytes()
        assert all(r["seconds"] == "0.0" for r in read_rows(first))

    def test_rows_get_their_own_run_directory(self, tmp_path, tiny_dataset, train_cfg):
        ablate(tiny_dataset, [DEFAULT_GRID[2]], tmp_path / "abl", base=train_cfg)
        assert (tmp_path / "abl" / "00_trick_oa_s1" / "final.nqckpt").is_file()

    @pytest.mark.slow
    def test_full_default_grid(self, tmp_path, tiny_dataset, train_cfg):
        rows = read_rows(ablate(tiny_dataset, "default", tmp_path / "abl", base=train_cfg))
        assert [r["config"] for r in rows] == [e.name for e in DEFAULT_GRID]
        assert all(r["status"] == "ok" for r in rows)
