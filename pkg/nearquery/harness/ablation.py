"""
Ablation runner: trains one model per named configuration on the same data
and seed, and tabulates validation metrics per row.
"""
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from nearquery.config import AblationEntry, TrainConfig, apply_overrides
from nearquery.utils.csvlog import write_rows

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ["config", "mDice", "mAcc", "mDice_small", "seconds", "status"]
ABLATION_CSV = "ablation.csv"


def _row(
    name: str,
    trick: bool = True,
    depth: int = 1,
    strategy: str = "none",
    fusion: str = "none",
    bls: str = "off",
) -> AblationEntry:
    """Grid row that pins every ablated setting"""
    return AblationEntry(
        name=name,
        overrides={
            "preprocess_trick": trick,
            "model.offset_head_depth": depth,
            "model.offset.strategy": strategy,
            "model.offset.squash_kind": "sigmoid_symmetric",
            "model.offset.scale_c": 2.0,
            "model.offset.threshold_px": 4.0,
            "model.offset.divisor": 2.0,
            "model.fusion.position": fusion,
            "model.bls_mode": bls,
        },
    )


# Rows in reporting order: baseline, input trick, each mechanism on top of it
DEFAULT_GRID: List[AblationEntry] = [
    _row("naive", trick=False),
    _row("trick"),
    _row("trick+OA(S1)", depth=2, strategy="clip_divide"),
    _row("trick+FF(inside)", fusion="inside"),
    _row("trick+FF(late)", fusion="late"),
    _row("trick+Sigmoid*2+BLS", depth=2, strategy="squash_scaled", bls="one"),
    _row("trick+Sigmoid*2+BLS(2)", depth=2, strategy="squash_scaled", bls="two"),
    _row("trick+Sigmoid*2+FF+BLS(2)", depth=2, strategy="squash_scaled", fusion="late", bls="two"),
]

NAMED_GRIDS: Dict[str, List[AblationEntry]] = {"default": DEFAULT_GRID}


@dataclass
class AblationRow:
    config: str
    mDice: float
    mAcc: float
    mDice_small: float
    seconds: float
    status: str

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


def _slug(index: int, name: str) -> str:
    return f"{index:02d}_" + re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower()


def resolve_grid(grid: Union[str, Sequence[AblationEntry]]) -> List[AblationEntry]:
    if isinstance(grid, str):
        if grid not in NAMED_GRIDS:
            raise KeyError(f"unknown ablation grid {grid!r}; known: {sorted(NAMED_GRIDS)}")
        return list(NAMED_GRIDS[grid])
    return list(grid)


def entry_config(entry: AblationEntry, base: Optional[TrainConfig] = None) -> TrainConfig:
    """TrainConfig of one grid entry: its overrides applied on top of ``base``"""
    base = base or TrainConfig()
    return apply_overrides(TrainConfig, base.model_dump(mode="json"), entry.overrides)


def ablate(
    data_root: Union[str, Path],
    grid: Union[str, Sequence[AblationEntry]],
    out_dir: Union[str, Path],
    base: Optional[TrainConfig] = None,
    timing: bool = True,
) -> Path:
    """Train every grid entry and write ``out_dir/ablation.csv``.

    A failing entry is logged and written as a ``failed`` row with nan
    metrics; the remaining entries still run.
    """
    # Imported here so that config-only users of this module stay light
    from nearquery.harness.trainer import train

    entries = resolve_grid(grid)
    if not entries:
        raise ValueError("ablation grid is empty")
    base = base or TrainConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: List[AblationRow] = []
    for index, entry in enumerate(entries):
        started = time.perf_counter()
        try:
            cfg = entry_config(entry, base)
            result = train(cfg, data_root, out_dir / _slug(index, entry.name))
            report = result.final_metrics
            row = AblationRow(
                config=entry.name,
                mDice=report.m_dice,
                mAcc=report.m_acc,
                mDice_small=report.dice_for_tier("small"),
                seconds=0.0,
                status="ok",
            )
        except Exception as e:
            logger.error(f"Ablation row {entry.name!r} failed: {type(e).__name__}: {e}")
            nan = float("nan")
            row = AblationRow(config=entry.name, mDice=nan, mAcc=nan, mDice_small=nan, seconds=0.0, status="failed")
        if timing:
            row.seconds = round(time.perf_counter() - started, 3)
        rows.append(row)
        logger.info(f"[{index + 1}/{len(entries)}] {entry.name}: mDice={row.mDice:.4f} status={row.status}")

    path = write_rows(out_dir / ABLATION_CSV, ABLATION_COLUMNS, [r.to_dict() for r in rows])
    logger.info(f"Ablation table written to {path}")
    return path


__all__ = ["ABLATION_COLUMNS", "DEFAULT_GRID", "NAMED_GRIDS", "AblationRow", "resolve_grid", "entry_config", "ablate"]
