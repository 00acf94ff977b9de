"""
Set-prediction losses.

Queries are matched one-to-one to ground-truth organs with the Hungarian
algorithm (scipy's ``linear_sum_assignment``) on a cost that mixes class
probability, mask BCE and mask Dice. Matching is recomputed for every
prediction set; unmatched queries are trained toward "no object".
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit, softmax as np_softmax

from nearquery.config import LossWeights
from nearquery.exceptions import ShapeError
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor, as_tensor

logger = logging.getLogger(__name__)

LOSS_TERMS = ("cls", "bce", "dice", "bls_a", "bls_b")


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

@dataclass
class SegTargets:
    """Ground truth of one image.

    ``classes`` are foreground class indices (label value - 1); ``masks`` are
    the matching binary masks at full resolution and ``coverage`` their area
    fractions on the mask-logit grid.
    """
    label_map: np.ndarray
    n_classes: int
    classes: np.ndarray
    masks: np.ndarray
    coverage: np.ndarray

    @property
    def n_targets(self) -> int:
        return int(len(self.classes))

    @classmethod
    def from_label_map(
        cls,
        label_map: np.ndarray,
        n_classes: int,
        mask_size: Optional[Tuple[int, int]] = None,
    ) -> "SegTargets":
        label_map = np.asarray(label_map)
        height, width = label_map.shape
        if mask_size is None:
            mask_size = (height // 4, width // 4)
        mh, mw = mask_size
        if height % mh or width % mw:
            raise ShapeError(f"SegTargets: label map {label_map.shape} not a multiple of mask size {mask_size}")
        if label_map.size and int(label_map.max()) > n_classes:
            raise ShapeError(f"SegTargets: label value {int(label_map.max())} exceeds {n_classes} classes")
        present = [c for c in range(1, n_classes + 1) if (label_map == c).any()]
        masks = np.stack([(label_map == c) for c in present]).astype(np.float64) if present \
            else np.zeros((0, height, width))
        fh, fw = height // mh, width // mw
        coverage = masks.reshape(len(present), mh, fh, mw, fw).mean(axis=(2, 4))
        return cls(
            label_map=label_map,
            n_classes=n_classes,
            classes=np.array([c - 1 for c in present], dtype=np.int64),
            masks=masks,
            coverage=coverage,
        )


@dataclass
class MatchResult:
    """Injective (query, target) assignment"""
    assignment: List[Tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.assignment], dtype=np.int64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([t for _, t in self.assignment], dtype=np.int64)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def dice_loss(pred_prob: Tensor, target: Union[Tensor, np.ndarray], eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) over the last two axes,
    averaged over any leading axes"""
    target = as_tensor(target, pred_prob) if not isinstance(target, Tensor) else target
    if pred_prob.shape != target.shape:
        raise ShapeError(f"dice_loss: prediction {pred_prob.shape} vs target {target.shape}")
    if pred_prob.ndim < 2:
        raise ShapeError(f"dice_loss: expected [..., H, W], got {pred_prob.shape}")
    axes = (-2, -1)
    inter = (pred_prob * target).sum(axis=axes)
    denom = pred_prob.sum(axis=axes) + target.sum(axis=axes) + eps
    loss = 1.0 - (inter * 2.0 + eps) / denom
    return loss.mean() if loss.ndim else loss


def cross_entropy_loss(
    logits: Tensor,
    targets: Sequence[int],
    class_weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Weighted mean of -log softmax(logits)[target] over rows of [N, C']"""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: logits must be [N, C'], got {logits.shape}")
    n, n_cls = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy_loss: {targets.shape} targets for logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= n_cls):
        raise ValueError(f"cross_entropy_loss: target outside [0, {n_cls}): {targets.tolist()}")
    weights = np.ones(n_cls) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    per_row = weights[targets].astype(logits.dtype)
    total_weight = float(per_row.sum())
    if n == 0 or total_weight == 0.0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    picked = ops.log_softmax(logits, axis=-1)[np.arange(n), targets]
    return (picked * per_row).sum() * (-1.0 / total_weight)


def mask_bce_loss(mask_logits: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean binary cross-entropy with logits: softplus(x) - x*t"""
    target = as_tensor(target, mask_logits) if not isinstance(target, Tensor) else target
    if mask_logits.shape != target.shape:
        raise ShapeError(f"mask_bce_loss: logits {mask_logits.shape} vs target {target.shape}")
    return (ops.softplus(mask_logits) - mask_logits * target).mean()


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def solve_assignment(cost: np.ndarray) -> MatchResult:
    """Minimum-cost injective assignment of rows (queries) to columns (targets)"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"solve_assignment: cost must be 2-D, got {cost.shape}")
    if cost.size == 0:
        return MatchResult()
    rows, cols = linear_sum_assignment(cost)
    return MatchResult(
        assignment=[(int(r), int(c)) for r, c in zip(rows, cols)],
        total_cost=float(cost[rows, cols].sum()),
    )


def matching_cost(
    class_logits: np.ndarray,
    mask_logits: np.ndarray,
    target_classes: np.ndarray,
    target_coverage: np.ndarray,
    weights: LossWeights,
) -> np.ndarray:
    """[Q, T] cost: lambda_cls * (-p(c)) + lambda_bce * BCE + lambda_dice * Dice"""
    class_logits = np.asarray(class_logits, dtype=np.float64)
    x = np.asarray(mask_logits, dtype=np.float64).reshape(class_logits.shape[0], -1)
    t = np.asarray(target_coverage, dtype=np.float64).reshape(len(target_classes), -1)
    if x.shape[1] != t.shape[1]:
        raise ShapeError(f"matching_cost: mask grid {x.shape} vs target grid {t.shape}")
    n_pix = x.shape[1]

    cost_cls = -np_softmax(class_logits, axis=-1)[:, target_classes]
    cost_bce = (np.logaddexp(0.0, x).sum(axis=1)[:, None] - x @ t.T) / n_pix
    p = expit(x)
    cost_dice = 1.0 - (2.0 * (p @ t.T) + 1.0) / (p.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + 1.0)
    return weights.cls * cost_cls + weights.bce * cost_bce + weights.dice * cost_dice


def hungarian_match(
    class_logits: Union[Tensor, np.ndarray],
    mask_logits: Union[Tensor, np.ndarray],
    targets: SegTargets,
    weights: LossWeights,
) -> MatchResult:
    """Match queries to the targets of one image at mask-logit resolution"""
    if targets.n_targets == 0:
        return MatchResult()
    cl = class_logits.data if isinstance(class_logits, Tensor) else class_logits
    ml = mask_logits.data if isinstance(mask_logits, Tensor) else mask_logits
    if targets.n_targets > cl.shape[0]:
        raise ShapeError(
            f"hungarian_match: {targets.n_targets} targets but only {cl.shape[0]} queries"
        )
    cost = matching_cost(cl, ml, targets.classes, targets.coverage, weights)
    return solve_assignment(cost)


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------

def _prediction_set_terms(ps, targets: SegTargets, weights: LossWeights):
    n_queries, n_cls = ps.class_logits.shape
    match = hungarian_match(ps.class_logits, ps.mask_logits, targets, weights)

    class_targets = np.full(n_queries, n_cls - 1, dtype=np.int64)
    class_weights = np.ones(n_cls)
    class_weights[-1] = weights.no_object
    for q, t in match.assignment:
        class_targets[q] = targets.classes[t]
    ce = cross_entropy_loss(ps.class_logits, class_targets, class_weights)

    if not match.assignment:
        return ce, None, None
    height, width = targets.label_map.shape
    matched = ps.mask_logits[match.queries]
    upsampled = ops.resize_bilinear(matched, height, width)
    target_masks = targets.masks[match.targets]
    bce = mask_bce_loss(upsampled, target_masks)
    dice = dice_loss(ops.sigmoid(upsampled), target_masks)
    return ce, bce, dice


def _bls_a_terms(logits: Tensor, targets: SegTargets) -> Tensor:
    n_cls = logits.shape[0]
    pixels = logits.reshape(n_cls, -1).transpose(1, 0)
    ce = cross_entropy_loss(pixels, targets.label_map.reshape(-1).astype(np.int64))
    onehot = (targets.label_map[None] == np.arange(n_cls)[:, None, None]).astype(logits.dtype)
    dice = dice_loss(ops.softmax(logits, axis=0), onehot)
    return ce + dice


def _bls_b_terms(logits: Tensor, targets: SegTargets) -> Tensor:
    foreground = (targets.label_map > 0)[None].astype(logits.dtype)
    return mask_bce_loss(logits, foreground) + dice_loss(ops.sigmoid(logits), foreground)


def total_loss(outputs, targets: SegTargets, weights: LossWeights) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted loss over all prediction sets plus the auxiliary heads.

    Returns:
        (scalar loss, breakdown) where the breakdown holds the weighted terms
        cls, bce, dice, bls_a, bls_b and sums to the total
    """
    acc: Dict[str, Optional[Tensor]] = {name: None for name in LOSS_TERMS}

    def add(name: str, value: Optional[Tensor], scale: float) -> None:
        if value is None:
            return
        term = value * scale
        acc[name] = term if acc[name] is None else acc[name] + term

    for ps in outputs.predictions:
        ce, bce, dice = _prediction_set_terms(ps, targets, weights)
        add("cls", ce, weights.cls)
        add("bce", bce, weights.bce)
        add("dice", dice, weights.dice)
    if outputs.bls_a is not None:
        add("bls_a", _bls_a_terms(outputs.bls_a, targets), weights.bls_a)
    if outputs.bls_b is not None:
        add("bls_b", _bls_b_terms(outputs.bls_b, targets), weights.bls_b)

    present = [acc[name] for name in LOSS_TERMS if acc[name] is not None]
    total = present[0]
    for term in present[1:]:
        total = total + term
    breakdown = {name: (float(acc[name].data) if acc[name] is not None else 0.0) for name in LOSS_TERMS}
    return total, breakdown


__all__ = [
    "LOSS_TERMS",
    "SegTargets",
    "MatchResult",
    "dice_loss",
    "cross_entropy_loss",
    "mask_bce_loss",
    "solve_assignment",
    "matching_cost",
    "hungarian_match",
    "total_loss",
]
