"""
End-to-end segmentation network: backbone -> pixel decoder -> query decoder,
plus the optional auxiliary heads and semantic inference
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit, softmax as np_softmax

from nearquery.config import ModelConfig
from nearquery.model.backbone import Backbone, backbone_forward
from nearquery.model.bls import BlsHeads, bls_forward
from nearquery.model.layers import Initializer, Module
from nearquery.model.pixel_decoder import PixelDecoder, pixel_decoder_forward
from nearquery.model.query_decoder import PredictionSet, QueryDecoder, decoder_forward
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class DecoderOutputs:
    """All predictions for one image"""
    predictions: List[PredictionSet]
    bls_a: Optional[Tensor] = None
    bls_b: Optional[Tensor] = None
    image_size: Tuple[int, int] = (0, 0)

    @property
    def final(self) -> PredictionSet:
        return self.predictions[-1]


class SegModel(Module):
    """Parameters and wiring of the full network"""

    def __init__(self, cfg: ModelConfig, dtype: str = "f32", in_channels: int = 3):
        self.config = cfg
        init = Initializer(seed=cfg.seed, dtype=dtype)
        self.dtype = init.dtype
        self.backbone = Backbone(init, cfg.backbone_channels, in_channels=in_channels)
        self.pixel_decoder = PixelDecoder(init, cfg)
        self.query_decoder = QueryDecoder(init, cfg)
        self.bls = BlsHeads(init, cfg)
        logger.debug(f"SegModel built: {self.num_parameters()} parameters ({len(self.parameters())} tensors)")

    def forward(self, image: Tensor) -> DecoderOutputs:
        return model_forward(image, self)

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace parameter values (names and shapes must already agree)"""
        for name, param in self.named_parameters():
            param.data = np.array(arrays[name], dtype=param.dtype, copy=True)


def model_forward(image: Tensor, model: SegModel) -> DecoderOutputs:
    """Run the network on a [3, H, W] image (H, W divisible by 32)"""
    cfg = model.config
    if image.dtype != model.dtype:
        image = Tensor(image.data.astype(model.dtype))
    pyr = backbone_forward(image, model.backbone)
    pixel = pixel_decoder_forward(pyr, cfg, model.pixel_decoder)
    predictions = decoder_forward(
        pixel.memories,
        pixel.level_shapes,
        pixel.level_pos,
        pixel.pixel_embed,
        model.query_decoder,
    )
    image_size = (image.shape[1], image.shape[2])
    bls_a, bls_b = bls_forward(pyr, pixel.pixel_embed, model.bls, image_size)
    return DecoderOutputs(predictions=predictions, bls_a=bls_a, bls_b=bls_b, image_size=image_size)


def semantic_inference(
    outputs: DecoderOutputs,
    height: Optional[int] = None,
    width: Optional[int] = None,
    threshold: float = 0.5,
) -> np.ndarray:
    """Per-pixel label map (0 = background) from the final prediction set.

    A pixel takes the class of the highest-scoring query whose upsampled mask
    probability exceeds ``threshold``. The score of a query is its largest
    foreground class probability; queries whose arg-max is "no object" never
    paint.
    """
    height = height or outputs.image_size[0]
    width = width or outputs.image_size[1]
    final = outputs.final
    probs = np_softmax(final.class_logits.data.astype(np.float64), axis=-1)
    n_classes = probs.shape[1] - 1
    fg = probs[:, :n_classes]
    scores = fg.max(axis=1)
    labels = fg.argmax(axis=1) + 1
    paints = probs.argmax(axis=1) != n_classes

    with no_grad():
        mask_logits = ops.resize_bilinear(Tensor(final.mask_logits.data), height, width).data
    mask_probs = expit(mask_logits.astype(np.float64))
    eligible = (mask_probs > threshold) & paints[:, None, None]
    score_map = np.where(eligible, scores[:, None, None], -1.0)
    best = score_map.argmax(axis=0)
    painted = score_map.max(axis=0) > -1.0
    return np.where(painted, labels[best], 0).astype(np.uint8)


def build_model(cfg: ModelConfig, dtype: str = "f32") -> SegModel:
    return SegModel(cfg, dtype=dtype)


__all__ = ["DecoderOutputs", "SegModel", "model_forward", "semantic_inference", "build_model"]
