"""
Pixel decoder: deformable-attention encoder over strides 8/16/32, feature
fusion of the otherwise unused backbone map, and the stride-4 pixel embedding
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from nearquery.config import ENCODER_LEVELS, FusionConfig, ModelConfig, OffsetAdjustConfig
from nearquery.exceptions import ConfigError, ShapeError
from nearquery.model.backbone import FeaturePyramid
from nearquery.model.deformattn import DeformAttnParams, ReferencePoints, make_reference_points
from nearquery.model.layers import (
    Conv2d,
    Initializer,
    LayerNorm,
    Linear,
    MLP,
    Module,
    map_from_tokens,
    sine_position_encoding,
    tokens_from_map,
)
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class PixelDecoderOutput:
    """Per-level memories [H_l*W_l, d] (strides 8, 16, 32) and the pixel embedding"""
    memories: List[Tensor]
    level_shapes: List[Tuple[int, int]]
    level_pos: List[Tensor]
    pixel_embed: Tensor

    @property
    def token_count(self) -> int:
        return sum(h * w for h, w in self.level_shapes)


# ---------------------------------------------------------------------------
# Feature fusion
# ---------------------------------------------------------------------------

def fuse_features(
    tokens: Tensor,
    extra: Tensor,
    level_shapes: Sequence[Tuple[int, int]],
    projection: Linear,
    cfg: FusionConfig,
) -> Tensor:
    """Add project(resize(extra, H_l x W_l)) to the level-major token sequence.

    ``tokens`` is [sum(H_l*W_l), d]; ``extra`` is the raw backbone map [C, H, W].
    The projection is bias-free, so a zero projection or a zero map leaves the
    tokens unchanged.
    """
    if cfg.position == "none":
        raise ConfigError("fuse_features called with fusion position 'none'")
    parts = [tokens_from_map(ops.resize_bilinear(extra, h, w)) for h, w in level_shapes]
    injected = projection(ops.concat(parts, axis=0) if len(parts) > 1 else parts[0])
    if injected.shape != tokens.shape:
        raise ShapeError(f"fuse_features: injected {injected.shape} vs tokens {tokens.shape}")
    return tokens + injected


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

class EncoderLayer(Module):
    """Deformable self-attention -> add & norm -> [fusion] -> FFN -> add & norm"""

    def __init__(self, init: Initializer, name: str, cfg: ModelConfig):
        self.attn = DeformAttnParams(
            init,
            f"{name}.attn",
            cfg.d_model,
            cfg.n_heads,
            ENCODER_LEVELS,
            cfg.n_points,
            offset_head_depth=cfg.offset_head_depth,
        )
        self.norm1 = LayerNorm(init, f"{name}.norm1", cfg.d_model)
        self.ffn = MLP(init, f"{name}.ffn", [cfg.d_model, cfg.hidden_ffn, cfg.d_model])
        self.norm2 = LayerNorm(init, f"{name}.norm2", cfg.d_model)

    def forward(
        self,
        tokens: Tensor,
        pos: Tensor,
        refs: ReferencePoints,
        offset_cfg: OffsetAdjustConfig,
        inject=None,
    ) -> Tensor:
        value_maps = split_levels(tokens, refs.level_shapes)
        attended = self.attn(tokens + pos, value_maps, refs, offset_cfg)
        x = self.norm1(tokens + attended)
        if inject is not None:
            x = inject(x)
        return self.norm2(x + self.ffn(x))


def split_levels(tokens: Tensor, level_shapes: Sequence[Tuple[int, int]]) -> List[Tensor]:
    """Level-major tokens [N, d] -> per-level maps [d, H_l, W_l]"""
    maps, start = [], 0
    for h, w in level_shapes:
        maps.append(map_from_tokens(tokens[start:start + h * w], h, w))
        start += h * w
    return maps


class PixelDecoder(Module):
    def __init__(self, init: Initializer, cfg: ModelConfig, name: str = "pixel_decoder"):
        c4, c8, c16, c32 = cfg.backbone_channels
        d = cfg.d_model
        self.d_model = d
        self.input_proj = [
            Conv2d(init, f"{name}.input_proj{i}", c, d, kernel=1)
            for i, c in enumerate((c8, c16, c32))
        ]
        self.level_embed = init.normal(f"{name}.level_embed", (ENCODER_LEVELS, d), std=0.1)
        self.layers = [EncoderLayer(init, f"{name}.layer{i}", cfg) for i in range(cfg.encoder_layers)]
        self.fusion_proj: Optional[Linear] = None
        if cfg.fusion.position != "none":
            c_src = c4 if cfg.fusion.source_level == "stride4" else c32
            self.fusion_proj = Linear(init, f"{name}.fusion_proj", c_src, d, bias=False)
        self.pixel_proj = Conv2d(init, f"{name}.pixel_proj", c4, d, kernel=1)
        self.memory_proj = Conv2d(init, f"{name}.memory_proj", d, d, kernel=1)

    def forward(self, pyr: FeaturePyramid, cfg: ModelConfig) -> PixelDecoderOutput:
        return pixel_decoder_forward(pyr, cfg, self)


def pixel_decoder_forward(pyr: FeaturePyramid, cfg: ModelConfig, decoder: PixelDecoder) -> PixelDecoderOutput:
    """Encode strides 8/16/32 into memories and build the stride-4 pixel embedding"""
    levels = [pyr.stride8, pyr.stride16, pyr.stride32]
    level_shapes = [(m.shape[1], m.shape[2]) for m in levels]
    dtype = pyr.stride4.dtype

    token_blocks, pos_blocks = [], []
    for i, (fmap, proj) in enumerate(zip(levels, decoder.input_proj)):
        h, w = level_shapes[i]
        token_blocks.append(tokens_from_map(proj(fmap)))
        sine = Tensor(sine_position_encoding(h, w, decoder.d_model, dtype=dtype))
        pos_blocks.append(sine + decoder.level_embed[i])
    tokens = ops.concat(token_blocks, axis=0)
    pos = ops.concat(pos_blocks, axis=0)
    refs = make_reference_points(level_shapes, dtype=dtype)

    fusion = cfg.fusion
    extra = None
    if fusion.position != "none":
        extra = pyr.stride4 if fusion.source_level == "stride4" else pyr.stride32

    def inject(x: Tensor) -> Tensor:
        return fuse_features(x, extra, level_shapes, decoder.fusion_proj, fusion)

    if fusion.position == "early":
        tokens = inject(tokens)
    for layer in decoder.layers:
        tokens = layer(
            tokens,
            pos,
            refs,
            cfg.offset,
            inject=inject if fusion.position == "inside" else None,
        )
    if fusion.position == "late":
        tokens = inject(tokens)

    memories, start = [], 0
    for h, w in level_shapes:
        memories.append(tokens[start:start + h * w])
        start += h * w

    h4, w4 = pyr.stride4.shape[1], pyr.stride4.shape[2]
    h8, w8 = level_shapes[0]
    memory8 = decoder.memory_proj(map_from_tokens(memories[0], h8, w8))
    pixel_embed = decoder.pixel_proj(pyr.stride4) + ops.resize_bilinear(memory8, h4, w4)

    level_pos = []
    start = 0
    for h, w in level_shapes:
        level_pos.append(pos[start:start + h * w])
        start += h * w
    return PixelDecoderOutput(
        memories=memories,
        level_shapes=level_shapes,
        level_pos=level_pos,
        pixel_embed=pixel_embed,
    )


__all__ = [
    "PixelDecoderOutput",
    "fuse_features",
    "EncoderLayer",
    "split_levels",
    "PixelDecoder",
    "pixel_decoder_forward",
]
