"""
Configuration management using Pydantic models and Pydantic Settings.

Run configuration (model, loss, phantom, training) is plain JSON validated by
the models below; every model forbids unknown keys so a typo in a config file
or a dotted CLI flag fails loudly.

Process-level settings are resolved in this order (higher wins):
1. Environment variables (NEARQUERY_*)
2. .env file at the repository root
"""
import copy
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(dotenv_path=env_path)

logger = logging.getLogger(__name__)

# Encoder attends over strides 8/16/32; the stride-4 map feeds the pixel
# embedding and, optionally, feature fusion.
ENCODER_LEVELS = 3

# Radius ranges (px) and aspect-ratio ranges per organ size tier
TIER_RADII: Dict[str, Tuple[float, float]] = {
    "large": (20.0, 30.0),
    "mid": (8.0, 14.0),
    "small": (2.0, 5.0),
}
TIER_ASPECT: Dict[str, Tuple[float, float]] = {
    "large": (0.45, 0.6),
    "mid": (0.6, 0.9),
    "small": (0.85, 1.0),
}
MAX_FOREGROUND_FRACTION = 0.15


def min_organ_area(tier: str) -> float:
    """Area (px) of the smallest ellipse a tier can draw"""
    return math.pi * TIER_RADII[tier][0] ** 2 * TIER_ASPECT[tier][0]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# Model configuration
# ---------------------------------------------------------------------------

class OffsetAdjustConfig(_Strict):
    """Offset adjustment strategy and its constants"""

    strategy: Literal["none", "clip_divide", "squash", "squash_scaled"] = "none"
    squash_kind: Literal["softmax_sign", "sigmoid_symmetric"] = "sigmoid_symmetric"
    threshold_px: float = Field(default=4.0, ge=0.0)
    divisor: float = Field(default=2.0, gt=1.0)
    scale_c: float = Field(default=2.0, gt=0.0)

    @property
    def effective_scale(self) -> float:
        """Scale applied by the squash strategies (plain squash is scale 1)"""
        return 1.0 if self.strategy == "squash" else self.scale_c


class FusionConfig(_Strict):
    """Where and from which map the unused backbone level is injected"""

    position: Literal["none", "early", "inside", "late"] = "none"
    source_level: Literal["stride4", "stride32"] = "stride4"


class ModelConfig(_Strict):
    """Network hyper-parameters"""

    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    n_points: int = Field(default=4, ge=1)
    encoder_layers: int = Field(default=3, ge=1)
    decoder_rounds: int = Field(default=3, ge=1)
    n_queries: int = Field(default=20, ge=1)
    n_classes: int = Field(default=6, ge=1, le=254)
    ffn_dim: Optional[int] = Field(default=None, ge=1)
    backbone_channels: Tuple[int, int, int, int] = (16, 32, 64, 96)
    offset: OffsetAdjustConfig = OffsetAdjustConfig()
    offset_head_depth: int = Field(default=2, ge=1)
    fusion: FusionConfig = FusionConfig()
    bls_mode: Literal["off", "one", "two"] = "off"
    bls_hidden: int = Field(default=32, ge=1)
    mask_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.offset_head_depth < 2 and self.offset.strategy != "none":
            raise ValueError(
                "offset adjustment requires the deepened offset head "
                f"(offset_head_depth >= 2, got {self.offset_head_depth})"
            )
        if self.n_queries < self.n_classes:
            raise ValueError(
                f"n_queries ({self.n_queries}) must be at least n_classes ({self.n_classes}): "
                "an image can hold one object of every class"
            )
        if any(c < 1 for c in self.backbone_channels):
            raise ValueError(f"backbone_channels must be positive: {self.backbone_channels}")
        return self

    @property
    def decoder_layers(self) -> int:
        return self.decoder_rounds * ENCODER_LEVELS

    @property
    def hidden_ffn(self) -> int:
        return self.ffn_dim or 2 * self.d_model


class LossWeights(_Strict):
    """Weights of the loss terms and of the no-object class"""

    cls: float = Field(default=2.0, ge=0.0)
    bce: float = Field(default=5.0, ge=0.0)
    dice: float = Field(default=5.0, ge=0.0)
    bls_a: float = Field(default=0.4, ge=0.0)
    bls_b: float = Field(default=0.4, ge=0.0)
    no_object: float = Field(default=0.1, ge=0.0)


# ---------------------------------------------------------------------------
# Phantom dataset configuration
# ---------------------------------------------------------------------------

class OrganClass(_Strict):
    """One synthetic organ class"""

    name: str = Field(min_length=1)
    tier: Literal["large", "mid", "small"]
    intensity_mean: float = Field(ge=0.0, le=1.0)
    intensity_sigma: float = Field(default=0.03, ge=0.0)


def _default_classes() -> List[OrganClass]:
    return [
        OrganClass(name="mandible", tier="large", intensity_mean=0.85),
        OrganClass(name="brainstem", tier="mid", intensity_mean=0.45),
        OrganClass(name="parotid", tier="mid", intensity_mean=0.6),
        OrganClass(name="spinal_cord", tier="mid", intensity_mean=0.75),
        OrganClass(name="cochlea", tier="small", intensity_mean=0.95),
        OrganClass(name="optic_nerve", tier="small", intensity_mean=0.35),
    ]


class PhantomSpec(_Strict):
    """Synthetic small-organ benchmark description"""

    image_size: int = Field(default=128, ge=32)
    classes: List[OrganClass] = Field(default_factory=_default_classes)
    sigma_bg: float = Field(default=0.03, ge=0.0)
    n: int = Field(default=16, ge=0)
    seed: int = Field(default=0, ge=0)
    presence_prob: float = Field(default=0.9, ge=0.6, le=1.0)
    max_rejections: int = Field(default=100, ge=1)
    max_layouts: int = Field(default=50, ge=1)

    @field_validator("image_size")
    @classmethod
    def _divisible_by_32(cls, v: int) -> int:
        if v % 32 != 0:
            raise ValueError(f"image_size must be divisible by 32, got {v}")
        return v

    @field_validator("classes")
    @classmethod
    def _check_classes(cls, v: List[OrganClass]) -> List[OrganClass]:
        if not v:
            raise ValueError("at least one organ class is required")
        if len(v) > 254:
            raise ValueError(f"u8 labels hold at most 254 classes, got {len(v)}")
        names = [c.name for c in v]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names: {names}")
        if not any(c.tier == "small" for c in v):
            raise ValueError("at least one small-tier class is required")
        return v

    @model_validator(mode="after")
    def _check_organs_fit(self) -> "PhantomSpec":
        widest = max(TIER_RADII[c.tier][1] for c in self.classes)
        if 2.0 * widest > self.image_size:
            raise ValueError(f"image_size {self.image_size} cannot hold an organ of radius {widest:g} px")
        need = sum(min_organ_area(c.tier) for c in self.classes)
        budget = MAX_FOREGROUND_FRACTION * self.image_size ** 2
        if need >= budget:
            raise ValueError(
                f"the smallest organs of all classes cover {need:.0f} px, over the foreground "
                f"budget of {budget:.0f} px at image_size {self.image_size}"
            )
        return self


# ---------------------------------------------------------------------------
# Training / analysis configuration
# ---------------------------------------------------------------------------

class TrainConfig(_Strict):
    """Optimiser, schedule and data handling for one training run"""

    batch_size: int = Field(default=2, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    steps: int = Field(default=500, ge=1)
    seed: int = Field(default=0, ge=0)
    eval_interval: int = Field(default=50, ge=1)
    val_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    preprocess_trick: bool = True
    hflip: bool = False
    model: ModelConfig = ModelConfig()
    weights: LossWeights = LossWeights()

    @field_validator("betas")
    @classmethod
    def _check_betas(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v


class SpreadConfig(_Strict):
    """Synthetic sampling-spread experiment"""

    offset: OffsetAdjustConfig = OffsetAdjustConfig(
        strategy="squash_scaled", squash_kind="sigmoid_symmetric", scale_c=2.0
    )
    n_draws: int = Field(default=100_000, ge=1)
    seed: int = Field(default=7, ge=0)
    sigma: float = Field(default=3.0, gt=0.0)
    n_levels: int = Field(default=ENCODER_LEVELS, ge=1, le=4)
    n_points: int = Field(default=4, ge=1)


class AblationEntry(_Strict):
    """One named row of an ablation grid: dotted overrides on a TrainConfig"""

    name: str = Field(min_length=1)
    overrides: Dict[str, Any] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# Dotted-path helpers (shared by the CLI and the ablation runner)
# ---------------------------------------------------------------------------

def field_paths(model_cls: Type[BaseModel], prefix: str = "") -> List[str]:
    """List every dotted field path of a config model, nested models expanded"""
    paths: List[str] = []
    for name, info in model_cls.model_fields.items():
        path = f"{prefix}{name}"
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            paths.append(path)
            paths.extend(field_paths(annotation, prefix=f"{path}."))
        else:
            paths.append(path)
    return paths


def apply_overrides(
    model_cls: Type[BaseModel],
    base: Dict[str, Any],
    overrides: Dict[str, Any],
) -> BaseModel:
    """Apply ``{"a.b.c": value}`` overrides on a JSON document and validate it.

    Raises:
        KeyError: an override names a path the model does not have.
        pydantic.ValidationError: the resulting document is invalid.
    """
    known = set(field_paths(model_cls))
    doc: Dict[str, Any] = copy.deepcopy(base)
    for dotted, value in overrides.items():
        if dotted not in known:
            raise KeyError(dotted)
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                child = {}
                node[part] = child
            node = child
        node[parts[-1]] = value
    return model_cls.model_validate(doc)


# ---------------------------------------------------------------------------
# Runtime settings
# ---------------------------------------------------------------------------

class RuntimeSettings(BaseSettings):
    """Process-level settings read from the environment"""
    model_config = SettingsConfigDict(env_prefix="NEARQUERY_")

    threads: int = Field(default=0, ge=0)
    log_level: str = Field(default="INFO")
    log_file_path: Optional[str] = Field(default=None)


def get_runtime_settings() -> RuntimeSettings:
    """Read runtime settings fresh from the environment"""
    return RuntimeSettings()


__all__ = [
    "ENCODER_LEVELS",
    "TIER_RADII",
    "TIER_ASPECT",
    "MAX_FOREGROUND_FRACTION",
    "min_organ_area",
    "OffsetAdjustConfig",
    "FusionConfig",
    "ModelConfig",
    "LossWeights",
    "OrganClass",
    "PhantomSpec",
    "TrainConfig",
    "SpreadConfig",
    "AblationEntry",
    "RuntimeSettings",
    "field_paths",
    "apply_overrides",
    "get_runtime_settings",
]
