"""
Training loop and model evaluation.

One optimiser step consumes ``batch_size`` samples drawn from a seeded
shuffle. Each sample's graph is built and back-propagated in batch order with
its loss scaled by 1/B, so gradients accumulate in a fixed order and two runs
with the same seed write identical logs and checkpoints.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from nearquery.config import ModelConfig, TrainConfig
from nearquery.exceptions import ConfigError, DatasetError, TrainingDivergedError
from nearquery.harness.checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from nearquery.harness.metrics import MetricsReport, evaluate_metrics
from nearquery.lossmatch import LOSS_TERMS, SegTargets, total_loss
from nearquery.model.segmodel import SegModel, semantic_inference
from nearquery.numcore.optim import AdamState, adam_step
from nearquery.numcore.tensor import Tensor, dtype_name, no_grad
from nearquery.phantom import PhantomDataset
from nearquery.utils.csvlog import CsvLog
from nearquery.utils.rng import stream

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "loss_total"] + [f"loss_{t}" for t in LOSS_TERMS] + ["val_mDice"]
FINAL_CHECKPOINT = "final.nqckpt"
LAST_GOOD_CHECKPOINT = "last_good.nqckpt"
LOG_NAME = "train_log.csv"


@dataclass
class TrainResult:
    """What a finished run produced"""
    checkpoint_path: Path
    log_path: Path
    steps: int
    last_loss: float
    final_metrics: MetricsReport
    val_ids: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "checkpoint_path": str(self.checkpoint_path),
            "log_path": str(self.log_path),
            "steps": self.steps,
            "last_loss": self.last_loss,
            "mDice": self.final_metrics.m_dice,
            "val_ids": list(self.val_ids),
        }


@dataclass
class _Snapshot:
    """Parameter and optimiser values at one point of the run.

    Parameters and moments are replaced (never mutated) by ``adam_step``, so
    holding references is enough.
    """
    step: int
    params: List[np.ndarray]
    first_moment: List[np.ndarray]
    second_moment: List[np.ndarray]
    step_count: int

    @classmethod
    def take(cls, step: int, params: Sequence[Tensor], adam: AdamState) -> "_Snapshot":
        return cls(
            step=step,
            params=[p.data for p in params],
            first_moment=list(adam.first_moment),
            second_moment=list(adam.second_moment),
            step_count=adam.step_count,
        )

    def adam_state(self, adam: AdamState) -> AdamState:
        return AdamState(
            first_moment=self.first_moment,
            second_moment=self.second_moment,
            step_count=self.step_count,
            lr=adam.lr,
            beta1=adam.beta1,
            beta2=adam.beta2,
            eps=adam.eps,
        )


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def split_ids(ids: Sequence[str], val_fraction: float) -> Tuple[List[str], List[str]]:
    """(train, validation) ids; the last ceil(n * fraction) samples validate"""
    ids = list(ids)
    n_val = math.ceil(len(ids) * val_fraction) if val_fraction > 0 else 0
    if n_val == 0:
        return ids, []
    return ids[:-n_val], ids[-n_val:]


def batch_schedule(n_samples: int, batch_size: int, steps: int, seed: int) -> Iterator[List[int]]:
    """Sample indices per step: consecutive seeded permutations cut into batches"""
    rng = stream(seed, "shuffle")
    order: List[int] = []
    for _ in range(steps):
        batch: List[int] = []
        while len(batch) < batch_size:
            if not order:
                order = [int(i) for i in rng.permutation(n_samples)]
            batch.append(order.pop(0))
        yield batch


class _SampleCache:
    """Network inputs and loss targets, built once per (sample, flip)"""

    def __init__(self, dataset: PhantomDataset, n_classes: int):
        self.dataset = dataset
        self.n_classes = n_classes
        self._items: Dict[Tuple[int, bool], Tuple[np.ndarray, SegTargets]] = {}

    def get(self, index: int, hflip: bool = False) -> Tuple[np.ndarray, SegTargets]:
        key = (index, hflip)
        if key not in self._items:
            image, label = self.dataset.load(index, hflip=hflip)
            self._items[key] = (image, SegTargets.from_label_map(label, self.n_classes))
        return self._items[key]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict_labels(model: SegModel, dataset: PhantomDataset) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """(predicted label maps, ground-truth label maps) for every sample"""
    predictions, targets = [], []
    threshold = model.config.mask_threshold
    with no_grad():
        for image, label in dataset:
            outputs = model(Tensor(image.astype(model.dtype)))
            predictions.append(semantic_inference(outputs, threshold=threshold))
            targets.append(label)
    return predictions, targets


def evaluate_model(model: SegModel, dataset: PhantomDataset) -> MetricsReport:
    predictions, targets = predict_labels(model, dataset)
    return evaluate_metrics(
        predictions,
        targets,
        dataset.n_classes,
        class_names=dataset.manifest.class_names,
        class_tiers=dataset.class_tiers,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def checkpoint_meta(cfg: TrainConfig, model: SegModel, step: int) -> Dict:
    return {
        "model_config": cfg.model.model_dump(mode="json"),
        "preprocess_trick": cfg.preprocess_trick,
        "dtype": dtype_name(model.dtype),
        "step": step,
    }


def model_from_checkpoint(path: Union[str, Path]) -> Tuple[SegModel, Checkpoint]:
    """Rebuild a model from the configuration stored in a checkpoint and load its weights"""
    ckpt = load_checkpoint(path)
    if "model_config" not in ckpt.meta:
        raise ConfigError(f"checkpoint {path} carries no model configuration")
    cfg = ModelConfig.model_validate(ckpt.meta["model_config"])
    model = SegModel(cfg, dtype=ckpt.meta.get("dtype", "f32"))
    load_into(model, ckpt)
    return model, ckpt


def _save(path: Path, names: Sequence[str], arrays: Sequence[np.ndarray], adam: AdamState, meta: Dict) -> Path:
    return save_checkpoint(path, dict(zip(names, arrays)), adam=adam, meta=meta)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(
    cfg: TrainConfig,
    data_root: Union[str, Path],
    out_dir: Union[str, Path],
    model: Optional[SegModel] = None,
) -> TrainResult:
    """Train a model on a phantom dataset.

    Args:
        cfg: Optimiser, schedule and model configuration
        data_root: Dataset directory (manifest.json + rasters)
        out_dir: Receives the log CSV and checkpoints
        model: Optional pre-built model (its config must match ``cfg.model``)

    Returns:
        TrainResult for the final step

    Raises:
        DatasetError: empty dataset or empty training split
        TrainingDivergedError: the loss became non-finite
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = PhantomDataset(data_root, preprocess=cfg.preprocess_trick)
    if len(full) == 0:
        raise DatasetError(f"dataset {data_root} has no samples")
    if full.n_classes != cfg.model.n_classes:
        raise ConfigError(
            f"model.n_classes={cfg.model.n_classes} but dataset {data_root} has {full.n_classes} classes"
        )
    train_ids, val_ids = split_ids(full.ids, cfg.val_fraction)
    if not train_ids:
        raise DatasetError(f"val_fraction={cfg.val_fraction} leaves no training samples")
    train_set = full.subset(train_ids)
    val_set = full.subset(val_ids) if val_ids else train_set

    model = model or SegModel(cfg.model)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    adam = AdamState.create(params, lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.eps)
    cache = _SampleCache(train_set, cfg.model.n_classes)
    flips = stream(cfg.seed, "hflip")

    logger.info(
        f"Training {model.num_parameters()} parameters on {len(train_set)} samples "
        f"({len(val_ids)} held out) for {cfg.steps} steps, batch {cfg.batch_size}"
    )
    log_path = out_dir / LOG_NAME
    last_good = _Snapshot.take(0, params, adam)
    last_loss = float("nan")
    metrics: Optional[MetricsReport] = None

    with CsvLog(log_path, LOG_COLUMNS) as log:
        for step, batch in enumerate(batch_schedule(len(train_set), cfg.batch_size, cfg.steps, cfg.seed), start=1):
            current = _Snapshot.take(step - 1, params, adam)
            model.zero_grad()
            totals = dict.fromkeys(LOSS_TERMS, 0.0)
            step_loss = 0.0
            for index in batch:
                hflip = bool(flips.random() < 0.5) if cfg.hflip else False
                image, targets = cache.get(index, hflip)
                outputs = model(Tensor(image.astype(model.dtype)))
                loss, breakdown = total_loss(outputs, targets, cfg.weights)
                value = float(loss.data)
                if not math.isfinite(value):
                    path = _save(
                        out_dir / LAST_GOOD_CHECKPOINT,
                        names,
                        last_good.params,
                        last_good.adam_state(adam),
                        checkpoint_meta(cfg, model, last_good.step),
                    )
                    logger.error(f"Non-finite loss at step {step} (sample {train_set.ids[index]}); kept {path}")
                    raise TrainingDivergedError(
                        f"loss became {value} at step {step}", step=step, checkpoint_path=str(path)
                    )
                (loss * (1.0 / len(batch))).backward()
                step_loss += value / len(batch)
                for term in LOSS_TERMS:
                    totals[term] += breakdown[term] / len(batch)

            last_good = current
            adam_step(params, [p.grad for p in params], adam)
            last_loss = step_loss

            row = {"step": step, "loss_total": step_loss}
            row.update({f"loss_{t}": totals[t] for t in LOSS_TERMS})
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                metrics = evaluate_model(model, val_set)
                row["val_mDice"] = metrics.m_dice
                logger.info(f"step {step}/{cfg.steps} loss={step_loss:.4f} val_mDice={metrics.m_dice:.4f}")
            log.append(row)

    model.zero_grad()
    checkpoint_path = _save(
        out_dir / FINAL_CHECKPOINT,
        names,
        [p.data for p in params],
        adam,
        checkpoint_meta(cfg, model, cfg.steps),
    )
    logger.info(f"Training finished: loss={last_loss:.4f} checkpoint={checkpoint_path}")
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        steps=cfg.steps,
        last_loss=last_loss,
        final_metrics=metrics if metrics is not None else evaluate_model(model, val_set),
        val_ids=val_ids,
    )


__all__ = [
    "LOG_COLUMNS",
    "FINAL_CHECKPOINT",
    "LAST_GOOD_CHECKPOINT",
    "TrainResult",
    "split_ids",
    "batch_schedule",
    "predict_labels",
    "evaluate_model",
    "checkpoint_meta",
    "model_from_checkpoint",
    "train",
]
