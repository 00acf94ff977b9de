"""
Shared fixtures: micro model configurations and a tiny phantom dataset
"""
import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from nearquery.config import ModelConfig, OrganClass, PhantomSpec, TrainConfig

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s [%(levelname)s] %(message)s",
    datefmt="%H:%M:%S",
)


def micro_config(**overrides) -> ModelConfig:
    """Smallest model that still exercises every component"""
    base = dict(
        d_model=8,
        n_heads=2,
        n_points=2,
        encoder_layers=1,
        decoder_rounds=1,
        n_queries=3,
        n_classes=3,
        backbone_channels=(4, 4, 8, 8),
        bls_hidden=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


TINY_CLASSES = [
    OrganClass(name="gland", tier="mid", intensity_mean=0.6),
    OrganClass(name="dot_bright", tier="small", intensity_mean=0.95),
    OrganClass(name="dot_dark", tier="small", intensity_mean=0.4),
]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model_cfg() -> ModelConfig:
    return micro_config()


@pytest.fixture
def tiny_spec() -> PhantomSpec:
    return PhantomSpec(image_size=64, classes=TINY_CLASSES, n=4, seed=3)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec) -> Path:
    from nearquery.phantom import gen_phantom

    root = tmp_path / "phantoms"
    gen_phantom(tiny_spec, root)
    return root


@pytest.fixture
def train_cfg(model_cfg) -> TrainConfig:
    return TrainConfig(steps=2, batch_size=2, eval_interval=1, seed=5, model=model_cfg)
