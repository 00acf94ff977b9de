"""
Named finite-difference checks: every differentiable kernel plus a micro
end-to-end model, all in f64.

Inputs are drawn away from the kinks of piecewise-linear kernels (relu,
bilinear cell boundaries) so central differences are meaningful.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from nearquery.config import FusionConfig, LossWeights, ModelConfig, OffsetAdjustConfig
from nearquery.lossmatch import SegTargets, cross_entropy_loss, dice_loss, mask_bce_loss, total_loss
from nearquery.model.deformattn import DeformAttnParams, adjust_offsets, deform_attn_forward, make_reference_points
from nearquery.model.layers import Initializer
from nearquery.model.segmodel import SegModel
from nearquery.numcore import ops
from nearquery.numcore.gradcheck import GradcheckReport, backward_and_gradcheck
from nearquery.numcore.tensor import Tensor
from nearquery.utils.rng import stream

logger = logging.getLogger(__name__)

LossCase = Tuple[Callable[[], Tensor], List[Tensor]]


@dataclass(frozen=True)
class KernelCase:
    name: str
    build: Callable[[int], LossCase]
    max_entries: int = 64


def _param(rng: np.random.Generator, shape, name: str, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True, name=name)


def _weights(rng: np.random.Generator, shape) -> np.ndarray:
    """Fixed random projection turning an output into a scalar loss"""
    return rng.normal(size=shape)


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

def _arith(seed: int) -> LossCase:
    rng = stream(seed, "arith")
    a = _param(rng, (3, 4), "a")
    b = _param(rng, (4,), "b", 0.5, 1.5)
    w = _weights(rng, (3, 4))
    return (lambda: ((a * b - a / (b * b + 1.0) + (-a) ** 2) * w).sum()), [a, b]


def _matmul(seed: int) -> LossCase:
    rng = stream(seed, "matmul")
    a = _param(rng, (2, 3, 4), "a")
    b = _param(rng, (2, 4, 5), "b")
    c = _param(rng, (5, 2), "c")
    w = _weights(rng, (2, 3, 2))
    return (lambda: (((a @ b) @ c) * w).sum()), [a, b, c]


def _elementwise(seed: int) -> LossCase:
    rng = stream(seed, "elementwise")
    x = _param(rng, (4, 5), "x", 0.2, 2.0)
    w = _weights(rng, (4, 5))

    def loss() -> Tensor:
        y = ops.exp(x * 0.3) + ops.log(x) + ops.sigmoid(x) + ops.softplus(x * -1.0) + ops.sqrt(x)
        return (y * w).mean() + ops.abs_(x - 1.1).sum() * 0.1

    return loss, [x]


def _relu(seed: int) -> LossCase:
    rng = stream(seed, "relu")
    magnitude = rng.uniform(0.1, 1.0, size=(5, 6))
    x = Tensor(magnitude * rng.choice([-1.0, 1.0], size=(5, 6)), requires_grad=True, name="x")
    w = _weights(rng, (5, 6))
    return (lambda: (ops.relu(x) * w).sum()), [x]


def _softmax(seed: int) -> LossCase:
    rng = stream(seed, "softmax")
    x = _param(rng, (3, 5), "x", -2.0, 2.0)
    w = _weights(rng, (3, 5))
    return (lambda: (ops.softmax(x, axis=-1) * w).sum() + (ops.log_softmax(x, axis=0) * w).sum()), [x]


def _layer_norm(seed: int) -> LossCase:
    rng = stream(seed, "layer_norm")
    x = _param(rng, (4, 6), "x")
    gamma = _param(rng, (6,), "gamma", 0.5, 1.5)
    beta = _param(rng, (6,), "beta")
    w = _weights(rng, (4, 6))
    return (lambda: (ops.layer_norm(x, gamma, beta) * w).sum()), [x, gamma, beta]


def _indexing(seed: int) -> LossCase:
    rng = stream(seed, "indexing")
    x = _param(rng, (5, 4), "x")
    rows = np.array([0, 3, 3, 1])
    w = _weights(rng, (4, 2))

    def loss() -> Tensor:
        picked = x[rows][:, 1:3]
        joined = ops.concat([picked, ops.stack([x[0, :2], x[4, 2:]], axis=0)], axis=0)
        return (joined[:4] * w).sum() + ops.masked_fill(x, x.data > 0.5, 0.0).sum() + x.transpose(1, 0).reshape(-1).sum()

    return loss, [x]


def _conv2d(seed: int) -> LossCase:
    rng = stream(seed, "conv2d")
    x = _param(rng, (2, 7, 6), "x")
    k = _param(rng, (3, 2, 3, 3), "weight")
    b = _param(rng, (3,), "bias")
    w = _weights(rng, (3, 4, 3))
    return (lambda: (ops.conv2d(x, k, b, stride=2, padding=1) * w).sum()), [x, k, b]


def _grid_sample(seed: int) -> LossCase:
    rng = stream(seed, "grid_sample")
    fmap = _param(rng, (2, 4, 5), "fmap")
    cells = np.stack([rng.integers(-1, 5, size=7), rng.integers(-1, 4, size=7)], axis=-1)
    points = Tensor(cells + rng.uniform(0.1, 0.9, size=(7, 2)), requires_grad=True, name="points")
    w = _weights(rng, (7, 2))
    return (lambda: (ops.grid_sample_bilinear(fmap, points) * w).sum()), [fmap, points]


def _resize(seed: int) -> LossCase:
    rng = stream(seed, "resize")
    x = _param(rng, (2, 3, 4), "x")
    w1 = _weights(rng, (2, 6, 8))
    w2 = _weights(rng, (2, 2, 3))
    return (lambda: (ops.resize_bilinear(x, 6, 8) * w1).sum() + (ops.resize_bilinear(x, 2, 3) * w2).sum()), [x]


def _losses(seed: int) -> LossCase:
    rng = stream(seed, "losses")
    logits = _param(rng, (4, 3), "class_logits", -2.0, 2.0)
    masks = _param(rng, (2, 4, 4), "mask_logits", -2.0, 2.0)
    target = (rng.uniform(size=(2, 4, 4)) > 0.5).astype(np.float64)
    class_weights = np.array([1.0, 1.0, 0.1])

    def loss() -> Tensor:
        return (
            cross_entropy_loss(logits, [0, 2, 1, 2], class_weights)
            + mask_bce_loss(masks, target)
            + dice_loss(ops.sigmoid(masks), target)
        )

    return loss, [logits, masks]


def _offset_adjust(strategy: str, kind: str = "sigmoid_symmetric") -> Callable[[int], LossCase]:
    cfg = OffsetAdjustConfig(strategy=strategy, squash_kind=kind)

    def build(seed: int) -> LossCase:
        rng = stream(seed, f"offsets_{strategy}_{kind}")
        raw = Tensor(rng.normal(0.0, 3.0, size=(3, 2, 4, 2)), requires_grad=True, name="raw")
        w = _weights(rng, (3, 2, 4, 2))
        return (lambda: (adjust_offsets(raw, cfg) * w).sum()), [raw]

    return build


def _jitter(params: Sequence[Tensor], rng: np.random.Generator, scale: float) -> None:
    for p in params:
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


def _deform_attn(seed: int) -> LossCase:
    rng = stream(seed, "deform_attn")
    init = Initializer(seed=seed, dtype="f64")
    params = DeformAttnParams(init, "attn", d_model=4, n_heads=2, n_levels=2, n_points=2)
    # zero-initialised heads put every sample exactly on a texel centre
    _jitter(params.parameters(), rng, 0.2)
    refs = make_reference_points([(3, 3), (2, 2)], dtype=np.float64)
    queries = _param(rng, (len(refs), 4), "queries")
    maps = [_param(rng, (4, h, w), f"value{l}") for l, (h, w) in enumerate(refs.level_shapes)]
    cfg = OffsetAdjustConfig(strategy="squash_scaled", squash_kind="sigmoid_symmetric", scale_c=2.0)
    w = _weights(rng, (len(refs), 4))
    return (lambda: (deform_attn_forward(queries, maps, refs, cfg, params) * w).sum()), (
        params.parameters() + [queries] + maps
    )


MICRO_MODEL = ModelConfig(
    d_model=8,
    n_heads=2,
    n_points=2,
    encoder_layers=1,
    decoder_rounds=1,
    n_queries=3,
    n_classes=2,
    backbone_channels=(4, 4, 8, 8),
    offset=OffsetAdjustConfig(strategy="squash_scaled", squash_kind="sigmoid_symmetric", scale_c=2.0),
    offset_head_depth=2,
    fusion=FusionConfig(position="late"),
    bls_mode="two",
    bls_hidden=4,
)


def micro_label_map(size: int = 32) -> np.ndarray:
    label = np.zeros((size, size), dtype=np.uint8)
    label[4:16, 8:20] = 1
    label[20:28, 20:24] = 2
    return label


def _micro_model(seed: int) -> LossCase:
    rng = stream(seed, "micro_model")
    model = SegModel(MICRO_MODEL.model_copy(update={"seed": seed}), dtype="f64")
    _jitter(model.parameters(), rng, 0.05)
    image = Tensor(rng.uniform(0.0, 1.0, size=(3, 32, 32)))
    targets = SegTargets.from_label_map(micro_label_map(), MICRO_MODEL.n_classes)
    weights = LossWeights()
    return (lambda: total_loss(model(image), targets, weights)[0]), model.parameters()


KERNEL_CASES: List[KernelCase] = [
    KernelCase("arith", _arith),
    KernelCase("matmul", _matmul),
    KernelCase("elementwise", _elementwise),
    KernelCase("relu", _relu),
    KernelCase("softmax", _softmax),
    KernelCase("layer_norm", _layer_norm),
    KernelCase("indexing", _indexing),
    KernelCase("conv2d", _conv2d),
    KernelCase("grid_sample", _grid_sample),
    KernelCase("resize", _resize),
    KernelCase("losses", _losses),
    KernelCase("offsets_clip_divide", _offset_adjust("clip_divide")),
    KernelCase("offsets_sigmoid_symmetric", _offset_adjust("squash_scaled", "sigmoid_symmetric")),
    KernelCase("offsets_softmax_sign", _offset_adjust("squash_scaled", "softmax_sign")),
    KernelCase("deform_attn", _deform_attn),
    KernelCase("micro_model", _micro_model, max_entries=3),
]


def kernel_suite() -> Dict[str, KernelCase]:
    return {case.name: case for case in KERNEL_CASES}


def run_case(case: KernelCase, tol: float = 1e-4, seed: int = 0) -> GradcheckReport:
    loss_fn, params = case.build(seed)
    names = [f"{case.name}/{p.name or i}" for i, p in enumerate(params)]
    return backward_and_gradcheck(loss_fn, params, tol=tol, names=names, max_entries=case.max_entries, seed=seed)


def run_suite(
    tol: float = 1e-4,
    seed: int = 0,
    only: Optional[Sequence[str]] = None,
) -> Dict[str, GradcheckReport]:
    """Run the named cases (all by default) and return one report per case"""
    cases = kernel_suite()
    selected = list(only) if only else list(cases)
    unknown = [n for n in selected if n not in cases]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s) {unknown}; known: {sorted(cases)}")
    reports: Dict[str, GradcheckReport] = {}
    for name in selected:
        report = run_case(cases[name], tol=tol, seed=seed)
        reports[name] = report
        level = logging.INFO if report.passed else logging.WARNING
        logger.log(level, f"gradcheck {name}: max_rel_err={report.max_rel_err:.3e} passed={report.passed}")
    return reports


__all__ = ["KernelCase", "KERNEL_CASES", "MICRO_MODEL", "kernel_suite", "micro_label_map", "run_case", "run_suite"]
