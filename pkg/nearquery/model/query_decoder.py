"""
Masked-attention query decoder with class and mask prediction heads.

Layers visit the encoder levels round-robin from the coarsest (stride 32) to
the finest (stride 8). Each layer's cross-attention is restricted to the
foreground of the previous prediction's mask, resized to that level.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from nearquery.config import ENCODER_LEVELS, ModelConfig
from nearquery.model.layers import Initializer, LayerNorm, Linear, MLP, Module
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass
class PredictionSet:
    """One deep-supervision output: class logits [Q, C+1], mask logits [Q, H/4, W/4]"""
    class_logits: Tensor
    mask_logits: Tensor


def attention_level_order(n_layers: int, n_levels: int = ENCODER_LEVELS) -> List[int]:
    """Memory level index (0 = stride 8) visited by each decoder layer"""
    return [n_levels - 1 - (i % n_levels) for i in range(n_layers)]


class MultiHeadAttention(Module):
    def __init__(self, init: Initializer, name: str, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.q_proj = Linear(init, f"{name}.q_proj", d_model, d_model)
        self.k_proj = Linear(init, f"{name}.k_proj", d_model, d_model)
        self.v_proj = Linear(init, f"{name}.v_proj", d_model, d_model)
        self.out_proj = Linear(init, f"{name}.out_proj", d_model, d_model)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        blocked: Optional[np.ndarray] = None,
    ) -> Tensor:
        q = ops.split_heads(self.q_proj(query), self.n_heads)
        k = ops.split_heads(self.k_proj(key), self.n_heads)
        v = ops.split_heads(self.v_proj(value), self.n_heads)
        mask = None if blocked is None else blocked[None, :, :]
        return self.out_proj(ops.merge_heads(ops.dot_product_attention(q, k, v, mask)))


def admissible_mask(mask_prev: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Blocked positions [Q, n]: probability below threshold, unless a row would be fully blocked"""
    blocked = mask_prev.reshape(mask_prev.shape[0], -1) < threshold
    blocked[blocked.all(axis=1)] = False
    return blocked


def masked_cross_attention(
    queries: Tensor,
    query_pos: Tensor,
    tokens: Tensor,
    token_pos: Tensor,
    mask_prev: Optional[np.ndarray],
    attn: MultiHeadAttention,
    threshold: float = 0.5,
) -> Tensor:
    """Cross-attention of queries [Q, d] over level tokens [n, d].

    ``mask_prev`` holds per-query foreground probabilities at the level's
    resolution ([Q, H_l, W_l] or [Q, n]); positions below ``threshold`` get
    -inf logits. A query with no admissible position attends everywhere.
    """
    blocked = None if mask_prev is None else admissible_mask(np.asarray(mask_prev), threshold)
    return attn(queries + query_pos, tokens + token_pos, tokens, blocked)


class DecoderLayer(Module):
    """Masked cross-attention -> self-attention -> FFN, each add & norm"""

    def __init__(self, init: Initializer, name: str, cfg: ModelConfig):
        d = cfg.d_model
        self.cross_attn = MultiHeadAttention(init, f"{name}.cross_attn", d, cfg.n_heads)
        self.norm1 = LayerNorm(init, f"{name}.norm1", d)
        self.self_attn = MultiHeadAttention(init, f"{name}.self_attn", d, cfg.n_heads)
        self.norm2 = LayerNorm(init, f"{name}.norm2", d)
        self.ffn = MLP(init, f"{name}.ffn", [d, cfg.hidden_ffn, d])
        self.norm3 = LayerNorm(init, f"{name}.norm3", d)

    def forward(
        self,
        x: Tensor,
        query_pos: Tensor,
        tokens: Tensor,
        token_pos: Tensor,
        mask_prev: Optional[np.ndarray],
        threshold: float = 0.5,
    ) -> Tensor:
        x = self.norm1(x + masked_cross_attention(x, query_pos, tokens, token_pos, mask_prev, self.cross_attn, threshold))
        q = x + query_pos
        x = self.norm2(x + self.self_attn(q, q, x))
        return self.norm3(x + self.ffn(x))


class QueryDecoder(Module):
    def __init__(self, init: Initializer, cfg: ModelConfig, name: str = "query_decoder"):
        d = cfg.d_model
        self.n_classes = cfg.n_classes
        self.mask_threshold = cfg.mask_threshold
        self.query_feat = init.normal(f"{name}.query_feat", (cfg.n_queries, d), std=1.0)
        self.query_pos = init.normal(f"{name}.query_pos", (cfg.n_queries, d), std=1.0)
        self.layers = [DecoderLayer(init, f"{name}.layer{i}", cfg) for i in range(cfg.decoder_layers)]
        self.norm = LayerNorm(init, f"{name}.norm", d)
        self.class_head = Linear(init, f"{name}.class_head", d, cfg.n_classes + 1)
        self.mask_head = MLP(init, f"{name}.mask_head", [d, d, d, d])

    def predict(self, x: Tensor, pixel_embed: Tensor) -> PredictionSet:
        """Class and mask logits from the current query state"""
        h = self.norm(x)
        class_logits = self.class_head(h)
        mask_embed = self.mask_head(h)
        d, h4, w4 = pixel_embed.shape
        mask_logits = (mask_embed @ pixel_embed.reshape(d, h4 * w4)).reshape(x.shape[0], h4, w4)
        return PredictionSet(class_logits=class_logits, mask_logits=mask_logits)

    def forward(
        self,
        memories: Sequence[Tensor],
        level_shapes: Sequence[Tuple[int, int]],
        level_pos: Sequence[Tensor],
        pixel_embed: Tensor,
    ) -> List[PredictionSet]:
        return decoder_forward(memories, level_shapes, level_pos, pixel_embed, self)


def attention_mask_from(mask_logits: Tensor, size: Tuple[int, int]) -> np.ndarray:
    """Foreground probabilities of a prediction resized to a level (no gradient)"""
    with no_grad():
        resized = ops.resize_bilinear(Tensor(mask_logits.data), size[0], size[1])
    return expit(resized.data)


def decoder_forward(
    memories: Sequence[Tensor],
    level_shapes: Sequence[Tuple[int, int]],
    level_pos: Sequence[Tensor],
    pixel_embed: Tensor,
    decoder: QueryDecoder,
) -> List[PredictionSet]:
    """Run every decoder layer; returns decoder_layers + 1 prediction sets"""
    x = decoder.query_feat
    query_pos = decoder.query_pos
    predictions = [decoder.predict(x, pixel_embed)]
    order = attention_level_order(len(decoder.layers), len(memories))
    for layer, level in zip(decoder.layers, order):
        mask_prev = attention_mask_from(predictions[-1].mask_logits, level_shapes[level])
        x = layer(
            x,
            query_pos,
            memories[level],
            level_pos[level],
            mask_prev,
            threshold=decoder.mask_threshold,
        )
        predictions.append(decoder.predict(x, pixel_embed))
    return predictions


__all__ = [
    "PredictionSet",
    "attention_level_order",
    "MultiHeadAttention",
    "admissible_mask",
    "masked_cross_attention",
    "DecoderLayer",
    "QueryDecoder",
    "attention_mask_from",
    "decoder_forward",
]
