"""
Background-location-sensitive auxiliary heads.

Head A (mode "two" only) is a small FCN on the stride-8 backbone map that
predicts the full label map (C+1 classes). Head B is a 1x1 conv on the pixel
embedding predicting foreground vs background. Both are upsampled to the
input resolution.
"""
import logging
from typing import Optional, Tuple

from nearquery.config import ModelConfig
from nearquery.model.backbone import FeaturePyramid
from nearquery.model.layers import Conv2d, Initializer, Module
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor

logger = logging.getLogger(__name__)


class BlsHeadA(Module):
    """3x3 conv -> relu -> 3x3 conv -> relu -> 1x1 conv"""

    def __init__(self, init: Initializer, name: str, c_in: int, hidden: int, n_out: int):
        self.conv1 = Conv2d(init, f"{name}.conv1", c_in, hidden, 3)
        self.conv2 = Conv2d(init, f"{name}.conv2", hidden, hidden, 3)
        self.classifier = Conv2d(init, f"{name}.classifier", hidden, n_out, 1)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.relu(self.conv1(x))
        x = ops.relu(self.conv2(x))
        return self.classifier(x)


class BlsHeads(Module):
    def __init__(self, init: Initializer, cfg: ModelConfig, name: str = "bls"):
        self.mode = cfg.bls_mode
        self.head_a: Optional[BlsHeadA] = None
        self.head_b: Optional[Conv2d] = None
        if self.mode == "two":
            self.head_a = BlsHeadA(init, f"{name}.head_a", cfg.backbone_channels[1], cfg.bls_hidden, cfg.n_classes + 1)
        if self.mode in ("one", "two"):
            self.head_b = Conv2d(init, f"{name}.head_b", cfg.d_model, 1, 1)

    def forward(self, pyr: FeaturePyramid, pixel_embed: Tensor, image_size: Tuple[int, int]):
        return bls_forward(pyr, pixel_embed, self, image_size)


def bls_forward(
    pyr: FeaturePyramid,
    pixel_embed: Tensor,
    heads: BlsHeads,
    image_size: Tuple[int, int],
) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """(bls_a [(C+1), H, W] or None, bls_b [1, H, W] or None)"""
    height, width = image_size
    bls_a = bls_b = None
    if heads.head_a is not None:
        bls_a = ops.resize_bilinear(heads.head_a(pyr.stride8), height, width)
    if heads.head_b is not None:
        bls_b = ops.resize_bilinear(heads.head_b(pixel_embed), height, width)
    return bls_a, bls_b


__all__ = ["BlsHeadA", "BlsHeads", "bls_forward"]
