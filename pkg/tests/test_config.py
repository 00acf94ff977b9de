"""
Configuration models, dotted overrides and environment settings
"""
import pytest
from pydantic import ValidationError

from nearquery.config import (
    AblationEntry,
    ModelConfig,
    OffsetAdjustConfig,
    PhantomSpec,
    RuntimeSettings,
    TrainConfig,
    apply_overrides,
    field_paths,
    get_runtime_settings,
)
from nearquery.exceptions import ConfigError, NearQueryError, ShapeError


class TestModels:
    def test_unknown_field_rejected(self):
        with pytest.raises(ValidationError):
            ModelConfig(d_modle=32)

    def test_configs_are_frozen(self):
        cfg = ModelConfig()
        with pytest.raises(ValidationError):
            cfg.d_model = 3

    def test_heads_must_divide_width(self):
        with pytest.raises(ValidationError, match="divisible"):
            ModelConfig(d_model=10, n_heads=4)

    def test_queries_cover_every_class(self):
        with pytest.raises(ValidationError, match="n_queries"):
            ModelConfig(n_queries=5, n_classes=6)
        assert ModelConfig(n_queries=6, n_classes=6).n_queries == 6

    def test_plain_squash_has_unit_scale(self):
        assert OffsetAdjustConfig(strategy="squash", scale_c=5.0).effective_scale == 1.0
        assert OffsetAdjustConfig(strategy="squash_scaled", scale_c=5.0).effective_scale == 5.0

    def test_divisor_must_exceed_one(self):
        with pytest.raises(ValidationError):
            OffsetAdjustConfig(divisor=1.0)

    def test_betas_range(self):
        with pytest.raises(ValidationError):
            TrainConfig(betas=(0.9, 1.0))

    def test_presence_probability_floor(self):
        with pytest.raises(ValidationError):
            PhantomSpec(presence_prob=0.5)

    def test_json_round_trip(self):
        cfg = TrainConfig(steps=7, model=ModelConfig(bls_mode="two"))
        assert TrainConfig.model_validate_json(cfg.model_dump_json()) == cfg


class TestOverrides:
    def test_nested_paths_listed(self):
        paths = field_paths(TrainConfig)
        assert "model.offset.scale_c" in paths
        assert "model.fusion.position" in paths
        assert "weights.no_object" in paths

    def test_override_applies_and_validates(self):
        base = TrainConfig().model_dump(mode="json")
        cfg = apply_overrides(TrainConfig, base, {"model.offset.strategy": "clip_divide", "lr": 0.01})
        assert cfg.model.offset.strategy == "clip_divide"
        assert cfg.lr == 0.01
        assert base["lr"] == 0.001

    def test_override_leaves_nested_base_untouched(self):
        base = TrainConfig().model_dump(mode="json")
        apply_overrides(TrainConfig, base, {"model.offset.scale_c": 9.0, "model.fusion.position": "late"})
        assert base["model"]["offset"]["scale_c"] == 2.0
        assert base["model"]["fusion"]["position"] == "none"

    def test_unknown_path(self):
        with pytest.raises(KeyError):
            apply_overrides(TrainConfig, {}, {"model.nope": 1})

    def test_invalid_value(self):
        with pytest.raises(ValidationError):
            apply_overrides(TrainConfig, {}, {"model.offset_head_depth": 1, "model.offset.strategy": "squash"})

    def test_entry_needs_name(self):
        with pytest.raises(ValidationError):
            AblationEntry(name="")


class TestRuntimeSettings:
    def test_defaults(self, monkeypatch):
        for var in ("NEARQUERY_THREADS", "NEARQUERY_LOG_LEVEL", "NEARQUERY_LOG_FILE_PATH"):
            monkeypatch.delenv(var, raising=False)
        settings = get_runtime_settings()
        assert settings.threads == 0
        assert settings.log_level == "INFO"
        assert settings.log_file_path is None

    def test_reads_prefixed_environment(self, monkeypatch, tmp_path):
        monkeypatch.setenv("NEARQUERY_THREADS", "2")
        monkeypatch.setenv("NEARQUERY_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("NEARQUERY_LOG_FILE_PATH", str(tmp_path / "run.log"))
        settings = RuntimeSettings()
        assert settings.threads == 2
        assert settings.log_level == "DEBUG"
        assert settings.log_file_path.endswith("run.log")

    def test_negative_threads_rejected(self, monkeypatch):
        monkeypatch.setenv("NEARQUERY_THREADS", "-1")
        with pytest.raises(ValidationError):
            RuntimeSettings()


class TestErrors:
    def test_value_errors_are_catchable_both_ways(self):
        for cls in (ShapeError, ConfigError):
            assert issubclass(cls, NearQueryError)
            assert issubclass(cls, ValueError)
