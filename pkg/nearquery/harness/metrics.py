"""
Segmentation metrics: per-class Dice, IoU and pixel recall (Acc), their
foreground means and per-size-tier aggregates.

A class is scored on the images whose ground truth contains it; the per-image
values are averaged. Classes that never occur in the ground truth are left out
of every mean and listed in ``absent_classes``.
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from nearquery.exceptions import ShapeError

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["class", "tier", "dice", "iou", "acc"]


class ClassMetrics(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    class_index: int
    name: str
    tier: Optional[str] = None
    dice: float = Field(ge=0.0, le=1.0)
    iou: float = Field(ge=0.0, le=1.0)
    acc: float = Field(ge=0.0, le=1.0)
    n_images: int = Field(ge=1)


class MetricsReport(BaseModel):
    """Metrics of one prediction set against its ground truth"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    per_class: List[ClassMetrics] = Field(default_factory=list)
    m_dice: float = Field(default=0.0, alias="mDice")
    m_iou: float = Field(default=0.0, alias="mIoU")
    m_acc: float = Field(default=0.0, alias="mAcc")
    tier_dice: Dict[str, float] = Field(default_factory=dict)
    absent_classes: List[str] = Field(default_factory=list)
    n_images: int = 0

    def dice_for_tier(self, tier: str) -> float:
        return self.tier_dice.get(tier, float("nan"))

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)

    def csv_rows(self) -> List[Dict]:
        return [
            {"class": c.name, "tier": c.tier or "", "dice": c.dice, "iou": c.iou, "acc": c.acc}
            for c in self.per_class
        ]


def confusion_counts(pred: np.ndarray, target: np.ndarray, cls: int):
    """(|P and G|, |P|, |G|) pixel counts of one class"""
    p = pred == cls
    g = target == cls
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p)), int(np.count_nonzero(g))


def evaluate_metrics(
    predictions: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    n_classes: int,
    class_names: Optional[Sequence[str]] = None,
    class_tiers: Optional[Sequence[str]] = None,
) -> MetricsReport:
    """Score label maps (0 = background, 1..n_classes) against ground truth"""
    if len(predictions) != len(targets):
        raise ShapeError(f"evaluate_metrics: {len(predictions)} predictions for {len(targets)} targets")
    for i, (p, t) in enumerate(zip(predictions, targets)):
        if np.shape(p) != np.shape(t):
            raise ShapeError(f"evaluate_metrics: image {i} prediction {np.shape(p)} vs target {np.shape(t)}")
    names = list(class_names) if class_names is not None else [f"class{c}" for c in range(1, n_classes + 1)]
    tiers = list(class_tiers) if class_tiers else [None] * n_classes

    per_class: List[ClassMetrics] = []
    absent: List[str] = []
    for c in range(1, n_classes + 1):
        dices, ious, accs = [], [], []
        for pred, target in zip(predictions, targets):
            inter, n_pred, n_true = confusion_counts(np.asarray(pred), np.asarray(target), c)
            if n_true == 0:
                continue
            dices.append(2.0 * inter / (n_pred + n_true))
            ious.append(inter / (n_pred + n_true - inter))
            accs.append(inter / n_true)
        if not dices:
            absent.append(names[c - 1])
            continue
        per_class.append(
            ClassMetrics(
                class_index=c,
                name=names[c - 1],
                tier=tiers[c - 1],
                dice=float(np.mean(dices)),
                iou=float(np.mean(ious)),
                acc=float(np.mean(accs)),
                n_images=len(dices),
            )
        )
    if absent:
        logger.warning(f"Classes absent from every target (excluded from means): {absent}")

    def mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    tier_dice: Dict[str, float] = {}
    for tier in sorted({m.tier for m in per_class if m.tier}):
        tier_dice[tier] = mean([m.dice for m in per_class if m.tier == tier])

    return MetricsReport(
        per_class=per_class,
        m_dice=mean([m.dice for m in per_class]),
        m_iou=mean([m.iou for m in per_class]),
        m_acc=mean([m.acc for m in per_class]),
        tier_dice=tier_dice,
        absent_classes=absent,
        n_images=len(predictions),
    )


__all__ = ["REPORT_COLUMNS", "ClassMetrics", "MetricsReport", "confusion_counts", "evaluate_metrics"]
