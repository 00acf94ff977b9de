"""
Multi-scale deformable attention with offset adjustment.

Each query samples ``n_points`` locations per head and per level around its
reference point, reads them by bilinear interpolation and mixes them with
softmax weights. Raw offsets (level-pixel units) come from an offset head and
can be pulled toward the reference point by one of three strategies:

- clip_divide: vectors longer than ``threshold_px`` are divided by ``divisor``
- squash / squash_scaled: a bounded squashing function, optionally scaled

The module also measures how far sampling locations spread from their
reference points (``sampling_spread_stats``).
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from nearquery.config import OffsetAdjustConfig
from nearquery.exceptions import ShapeError
from nearquery.model.layers import Initializer, Linear, Module
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor, no_grad
from nearquery.utils.csvlog import write_rows
from nearquery.utils.rng import stream

logger = logging.getLogger(__name__)

SPREAD_COLUMNS = ["level", "strategy", "mean_norm", "median_norm", "max_norm", "frac_within_1px"]


# ---------------------------------------------------------------------------
# Reference points
# ---------------------------------------------------------------------------

@dataclass
class ReferencePoints:
    """Normalised (x, y) cell centres of every token, level-major"""
    points: np.ndarray
    level_shapes: List[Tuple[int, int]]

    @property
    def level_start_index(self) -> List[int]:
        starts, total = [], 0
        for h, w in self.level_shapes:
            starts.append(total)
            total += h * w
        return starts

    def __len__(self) -> int:
        return int(self.points.shape[0])


def make_reference_points(
    level_shapes: Sequence[Tuple[int, int]],
    dtype: Union[np.dtype, type] = np.float32,
) -> ReferencePoints:
    """Cell-centre reference points ((j+0.5)/W, (i+0.5)/H) for each level"""
    if not level_shapes:
        raise ShapeError("make_reference_points: empty level list")
    blocks = []
    for h, w in level_shapes:
        if h < 1 or w < 1:
            raise ShapeError(f"make_reference_points: level extents must be >= 1, got {(h, w)}")
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        blocks.append(np.stack([xs.ravel(), ys.ravel()], axis=-1))
    return ReferencePoints(
        points=np.concatenate(blocks, axis=0).astype(dtype),
        level_shapes=[(int(h), int(w)) for h, w in level_shapes],
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _grid_bias(n_heads: int, n_levels: int, n_points: int) -> np.ndarray:
    """Head-direction grid scaled by (point index + 1), flattened as (H, L, K, 2)"""
    thetas = np.arange(n_heads) * (2.0 * math.pi / n_heads)
    grid = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
    grid = grid / np.abs(grid).max(axis=-1, keepdims=True)
    grid = np.tile(grid[:, None, None, :], (1, n_levels, n_points, 1))
    grid = grid * (np.arange(n_points) + 1.0)[None, None, :, None]
    return grid.reshape(-1)


class OffsetHead(Module):
    """Depth 1: one linear layer. Depth >= 2: (linear -> relu) * (depth-1) -> linear.

    The last layer starts with zero weights and the grid bias, so initial
    sampling locations do not depend on the query.
    """

    def __init__(self, init: Initializer, name: str, d_model: int, n_out: int, bias: np.ndarray, depth: int = 2):
        self.hidden = [
            Linear(init, f"{name}.hidden{i}", d_model, d_model) for i in range(depth - 1)
        ]
        self.out = Linear(init, f"{name}.out", d_model, n_out, zero=True)
        self.out.bias.data = bias.astype(self.out.bias.dtype)

    @property
    def depth(self) -> int:
        return len(self.hidden) + 1

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = ops.relu(layer(x))
        return self.out(x)


class DeformAttnParams(Module):
    """Projections and heads of one deformable attention block"""

    def __init__(
        self,
        init: Initializer,
        name: str,
        d_model: int,
        n_heads: int,
        n_levels: int,
        n_points: int,
        offset_head_depth: int = 2,
    ):
        if d_model % n_heads != 0:
            raise ShapeError(f"{name}: d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_levels = n_levels
        self.n_points = n_points
        self.value_proj = Linear(init, f"{name}.value_proj", d_model, d_model)
        self.output_proj = Linear(init, f"{name}.output_proj", d_model, d_model)
        self.offset_head = OffsetHead(
            init,
            f"{name}.offset_head",
            d_model,
            n_heads * n_levels * n_points * 2,
            _grid_bias(n_heads, n_levels, n_points),
            depth=offset_head_depth,
        )
        self.weight_head = Linear(init, f"{name}.weight_head", d_model, n_heads * n_levels * n_points, zero=True)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def forward(
        self,
        queries: Tensor,
        value_maps: Sequence[Tensor],
        refs: ReferencePoints,
        cfg: OffsetAdjustConfig,
        return_weights: bool = False,
    ):
        return deform_attn_forward(queries, value_maps, refs, cfg, self, return_weights=return_weights)


# ---------------------------------------------------------------------------
# Offsets
# ---------------------------------------------------------------------------

def compute_offsets(queries: Tensor, params: DeformAttnParams) -> Tensor:
    """Raw offsets [N, heads, levels, points, 2] in level-pixel units"""
    if queries.ndim != 2 or queries.shape[1] != params.d_model:
        raise ShapeError(
            f"compute_offsets: queries {queries.shape} do not match d_model {params.d_model}"
        )
    raw = params.offset_head(queries)
    return raw.reshape(queries.shape[0], params.n_heads, params.n_levels, params.n_points, 2)


def adjust_offsets(raw: Tensor, cfg: OffsetAdjustConfig) -> Tensor:
    """Apply the configured offset adjustment to [..., points, 2] offsets"""
    if cfg.strategy == "none":
        return raw

    if cfg.strategy == "clip_divide":
        # the branch is a constant factor during backward
        norms = np.linalg.norm(raw.data, axis=-1, keepdims=True)
        factor = np.where(norms > cfg.threshold_px, 1.0 / cfg.divisor, 1.0).astype(raw.dtype)
        return raw * factor

    scale = cfg.effective_scale
    if cfg.squash_kind == "sigmoid_symmetric":
        return (ops.sigmoid(raw) * 2.0 - 1.0) * scale

    # softmax_sign: softmax over the points axis of |offset|, times sign(offset); a zero component stays 0
    sign = np.sign(raw.data).astype(raw.dtype)
    magnitude = ops.softmax(ops.abs_(raw), axis=-2)
    return magnitude * (sign * scale)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def deform_attn_forward(
    queries: Tensor,
    value_maps: Sequence[Tensor],
    refs: ReferencePoints,
    cfg: OffsetAdjustConfig,
    params: DeformAttnParams,
    return_weights: bool = False,
):
    """Deformable attention of N queries over per-level value maps [d, H_l, W_l].

    The level-l sampling location of a query is ref * (W_l, H_l) + offset in
    continuous pixel units; texel (i, j) is centred at (j + 0.5, i + 0.5).

    Returns:
        Tensor [N, d_model], or (output, attention weights [N, heads, levels, points])
        when ``return_weights`` is set
    """
    n_levels, n_heads, n_points = params.n_levels, params.n_heads, params.n_points
    if len(value_maps) != n_levels:
        raise ShapeError(
            f"deform_attn_forward: {len(value_maps)} value maps for {n_levels} levels"
        )
    n_queries = queries.shape[0]
    if refs.points.shape != (n_queries, 2):
        raise ShapeError(
            f"deform_attn_forward: reference points {refs.points.shape} for {n_queries} queries"
        )
    for level, vmap in enumerate(value_maps):
        if vmap.ndim != 3 or vmap.shape[0] != params.d_model:
            raise ShapeError(
                f"deform_attn_forward: level {level} map {vmap.shape} does not carry "
                f"{params.d_model} channels"
            )

    offsets = adjust_offsets(compute_offsets(queries, params), cfg)
    logits = params.weight_head(queries).reshape(n_queries, n_heads, n_levels * n_points)
    weights = ops.softmax(logits, axis=-1).reshape(n_queries, n_heads, n_levels, n_points)

    # reference points in texel-index coordinates per level: [N, 1, L, 1, 2]
    sizes = np.array([[w, h] for _, h, w in (m.shape for m in value_maps)], dtype=queries.dtype)
    anchors = (refs.points.astype(queries.dtype)[:, None, :] * sizes[None, :, :] - 0.5)[:, None, :, None, :]
    locations = offsets + anchors

    dh = params.head_dim
    projected = []
    for vmap in value_maps:
        c, h, w = vmap.shape
        tokens = params.value_proj(vmap.reshape(c, h * w).transpose(1, 0))
        projected.append(tokens.transpose(1, 0).reshape(c, h, w))

    head_outputs = []
    for head in range(n_heads):
        acc = None
        for level, vmap in enumerate(projected):
            head_map = vmap[head * dh:(head + 1) * dh]
            samples = ops.grid_sample_bilinear(head_map, locations[:, head, level])
            mixed = (samples * weights[:, head, level].reshape(n_queries, n_points, 1)).sum(axis=1)
            acc = mixed if acc is None else acc + mixed
        head_outputs.append(acc)

    out = params.output_proj(ops.concat(head_outputs, axis=1))
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# Sampling spread
# ---------------------------------------------------------------------------

@dataclass
class SpreadRow:
    level: int
    strategy: str
    mean_norm: float
    median_norm: float
    max_norm: float
    frac_within_1px: float


@dataclass
class SpreadReport:
    mode: str
    rows: List[SpreadRow] = field(default_factory=list)

    def to_rows(self) -> List[dict]:
        return [asdict(r) for r in self.rows]

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_rows(path, SPREAD_COLUMNS, self.to_rows())


def strategy_label(cfg: OffsetAdjustConfig) -> str:
    if cfg.strategy in ("squash", "squash_scaled"):
        return f"{cfg.strategy}:{cfg.squash_kind}"
    return cfg.strategy


def _summarise(level: int, label: str, offsets: np.ndarray) -> SpreadRow:
    norms = np.linalg.norm(offsets.reshape(-1, 2).astype(np.float64), axis=-1)
    return SpreadRow(
        level=level,
        strategy=label,
        mean_norm=float(norms.mean()),
        median_norm=float(np.median(norms)),
        max_norm=float(norms.max()),
        frac_within_1px=float(np.mean(norms <= 1.0)),
    )


def draw_raw_offsets(seed: int, level: int, n_draws: int, n_points: int, sigma: float) -> np.ndarray:
    """Synthetic raw offsets ~ Normal(0, sigma^2), [n_draws, n_points, 2] (f64)"""
    return stream(seed, level).normal(0.0, sigma, size=(n_draws, n_points, 2))


def sampling_spread_stats(
    cfg: OffsetAdjustConfig,
    n_draws: int = 100_000,
    seed: int = 7,
    sigma: float = 3.0,
    n_levels: int = 3,
    n_points: int = 4,
    queries: Optional[Tensor] = None,
    params: Optional[DeformAttnParams] = None,
) -> SpreadReport:
    """Norm statistics of adjusted offsets, one row per level.

    Synthetic mode (default) draws raw offsets from Normal(0, sigma^2). With
    ``queries`` and ``params`` the raw offsets come from the offset head
    instead and ``n_draws``/``sigma`` are ignored.
    """
    if queries is not None and params is not None:
        with no_grad():
            raw = compute_offsets(queries, params).data
        report = SpreadReport(mode="model")
        for level in range(params.n_levels):
            level_raw = raw[:, :, level].reshape(-1, params.n_points, 2)
            with no_grad():
                adjusted = adjust_offsets(Tensor(level_raw), cfg).data
            report.rows.append(_summarise(level, strategy_label(cfg), adjusted))
        return report

    if n_draws < 1:
        raise ValueError(f"n_draws must be >= 1, got {n_draws}")
    report = SpreadReport(mode="synthetic")
    for level in range(n_levels):
        raw = draw_raw_offsets(seed, level, n_draws, n_points, sigma)
        with no_grad():
            adjusted = adjust_offsets(Tensor(raw, dtype="f64"), cfg).data
        report.rows.append(_summarise(level, strategy_label(cfg), adjusted))
    logger.debug(f"spread stats ({report.mode}, {strategy_label(cfg)}): {len(report.rows)} levels")
    return report


__all__ = [
    "ReferencePoints",
    "make_reference_points",
    "OffsetHead",
    "DeformAttnParams",
    "compute_offsets",
    "adjust_offsets",
    "deform_attn_forward",
    "SpreadRow",
    "SpreadReport",
    "SPREAD_COLUMNS",
    "strategy_label",
    "draw_raw_offsets",
    "sampling_spread_stats",
]
