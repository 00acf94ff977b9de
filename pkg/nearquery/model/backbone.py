"""
Four-stage CNN backbone producing maps at strides 4, 8, 16 and 32
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from nearquery.exceptions import ShapeError
from nearquery.model.layers import Conv2d, Initializer, Module
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor

logger = logging.getLogger(__name__)

STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """Backbone maps ordered by stride (4, 8, 16, 32), each [C, H/s, W/s]"""
    maps: List[Tensor]

    @property
    def stride4(self) -> Tensor:
        return self.maps[0]

    @property
    def stride8(self) -> Tensor:
        return self.maps[1]

    @property
    def stride16(self) -> Tensor:
        return self.maps[2]

    @property
    def stride32(self) -> Tensor:
        return self.maps[3]

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(m.shape[0] for m in self.maps)

    @property
    def spatial_shapes(self) -> List[Tuple[int, int]]:
        return [(m.shape[1], m.shape[2]) for m in self.maps]


class Backbone(Module):
    """Stem (two stride-2 3x3 convs) then one stride-2 3x3 conv per stage"""

    def __init__(self, init: Initializer, channels: Sequence[int], in_channels: int = 3, name: str = "backbone"):
        c4, c8, c16, c32 = channels
        self.in_channels = in_channels
        self.stem = Conv2d(init, f"{name}.stem", in_channels, c4, 3, stride=2)
        self.stage4 = Conv2d(init, f"{name}.stage4", c4, c4, 3, stride=2)
        self.stage8 = Conv2d(init, f"{name}.stage8", c4, c8, 3, stride=2)
        self.stage16 = Conv2d(init, f"{name}.stage16", c8, c16, 3, stride=2)
        self.stage32 = Conv2d(init, f"{name}.stage32", c16, c32, 3, stride=2)

    def forward(self, image: Tensor) -> FeaturePyramid:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, backbone: Backbone) -> FeaturePyramid:
    """Run the backbone on a [C, H, W] image with H, W divisible by 32"""
    if image.ndim != 3 or image.shape[0] != backbone.in_channels:
        raise ShapeError(
            f"backbone_forward: expected [{backbone.in_channels}, H, W] image, got {image.shape}"
        )
    _, height, width = image.shape
    if height % 32 or width % 32:
        pad_h = (-height) % 32
        pad_w = (-width) % 32
        raise ShapeError(
            f"backbone_forward: image {height}x{width} is not divisible by 32; "
            f"pad by {pad_h} rows and {pad_w} columns"
        )
    x = ops.relu(backbone.stem(image))
    s4 = ops.relu(backbone.stage4(x))
    s8 = ops.relu(backbone.stage8(s4))
    s16 = ops.relu(backbone.stage16(s8))
    s32 = ops.relu(backbone.stage32(s16))
    return FeaturePyramid(maps=[s4, s8, s16, s32])


__all__ = ["STRIDES", "FeaturePyramid", "Backbone", "backbone_forward"]
