"""
Synthetic small-organ phantoms, the multi-scale channel-stacking trick and
the on-disk dataset format.

Layout of a dataset directory::

    manifest.json
    images/<id>.f32    little-endian float32, channels x H x W, row-major
    labels/<id>.u8     uint8, H x W, 0 = background, c = class c
    previews/<id>.png  optional, image and colourised labels side by side

Every sample draws from its own Philox stream keyed on (seed, sample index),
so a sample's bytes do not depend on how many samples are generated.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from nearquery.config import MAX_FOREGROUND_FRACTION, TIER_ASPECT, TIER_RADII, OrganClass, PhantomSpec
from nearquery.exceptions import DatasetError, ShapeError
from nearquery.numcore import ops
from nearquery.numcore.tensor import Tensor, no_grad
from nearquery.utils.rng import stream

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
BACKGROUND_LEVEL = 0.15
AREA_TOLERANCE = 0.3
TIER_ORDER = ("small", "mid", "large")

# Label colours for previews (index 0 = background)
_PALETTE = np.array(
    [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
    ],
    dtype=np.uint8,
)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

class SampleEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    image_path: str
    label_path: str
    height: int = Field(ge=1)
    width: int = Field(ge=1)
    channels: int = Field(default=1, ge=1)


class DatasetManifest(BaseModel):
    """Index of a dataset directory (paths are relative to it)"""
    model_config = ConfigDict(extra="forbid")

    version: int = MANIFEST_VERSION
    class_names: List[str]
    class_tiers: List[str] = Field(default_factory=list)
    samples: List[SampleEntry] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)
    seed: Optional[int] = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def entry(self, sample_id: str) -> SampleEntry:
        for entry in self.samples:
            if entry.id == sample_id:
                return entry
        raise DatasetError(f"sample {sample_id!r} is not in the manifest")


def save_manifest(manifest: DatasetManifest, root: Union[str, Path]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / MANIFEST_NAME
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(root: Union[str, Path]) -> Tuple[DatasetManifest, Path]:
    """Read ``manifest.json`` from a dataset directory (or the file itself)"""
    path = Path(root)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise DatasetError(f"invalid manifest {path}: {e.errors()[0]['msg']}") from e
    return manifest, path.parent


# ---------------------------------------------------------------------------
# Raster I/O
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    """One image [C, H, W] (float32) and its label map [H, W] (uint8)"""
    id: str
    image: np.ndarray
    label: np.ndarray

    def to_dict(self) -> Dict:
        return {"id": self.id, "shape": list(self.image.shape), "classes": np.unique(self.label).tolist()}


@dataclass
class SampleBatch:
    ids: List[str]
    images: np.ndarray
    labels: np.ndarray

    @classmethod
    def stack(cls, samples: Sequence[Sample]) -> "SampleBatch":
        return cls(
            ids=[s.id for s in samples],
            images=np.stack([s.image for s in samples]) if samples else np.zeros((0, 1, 1, 1), np.float32),
            labels=np.stack([s.label for s in samples]) if samples else np.zeros((0, 1, 1), np.uint8),
        )


def write_sample(root: Union[str, Path], sample_id: str, image: np.ndarray, label: np.ndarray) -> SampleEntry:
    """Write one image/label pair and return its manifest entry"""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    label = np.asarray(label)
    if image.ndim != 3 or label.shape != image.shape[1:]:
        raise ShapeError(f"write_sample: image {image.shape} and label {label.shape} disagree")
    if label.size and (label.min() < 0 or label.max() > 255):
        raise ShapeError(f"write_sample: label values outside uint8 range in {sample_id}")
    root = Path(root)
    entry = SampleEntry(
        id=sample_id,
        image_path=f"images/{sample_id}.f32",
        label_path=f"labels/{sample_id}.u8",
        height=image.shape[1],
        width=image.shape[2],
        channels=image.shape[0],
    )
    for rel in (entry.image_path, entry.label_path):
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
    (root / entry.image_path).write_bytes(image.astype("<f4").tobytes(order="C"))
    (root / entry.label_path).write_bytes(label.astype(np.uint8).tobytes(order="C"))
    return entry


def _read_exact(path: Path, expected: int, what: str) -> bytes:
    if not path.is_file():
        raise DatasetError(f"{what} file missing: {path}")
    data = path.read_bytes()
    if len(data) != expected:
        raise DatasetError(f"{what} file {path}: expected {expected} bytes, found {len(data)}")
    return data


def read_sample(manifest: DatasetManifest, root: Union[str, Path], sample_id: str) -> Sample:
    """Load one sample, checking byte lengths against the manifest"""
    entry = manifest.entry(sample_id)
    root = Path(root)
    c, h, w = entry.channels, entry.height, entry.width
    raw_image = _read_exact(root / entry.image_path, c * h * w * 4, "image")
    raw_label = _read_exact(root / entry.label_path, h * w, "label")
    image = np.frombuffer(raw_image, dtype="<f4").reshape(c, h, w).astype(np.float32)
    label = np.frombuffer(raw_label, dtype=np.uint8).reshape(h, w).copy()
    return Sample(id=sample_id, image=image, label=label)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def preprocess_trick(image: Union[Tensor, np.ndarray]) -> Tensor:
    """[1, H, W] -> [3, H, W]: original, up-then-down view, down-then-up view"""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if x.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"preprocess_trick: expected a [1, H, W] image, got {x.shape}")
    _, h, w = x.shape
    up = ops.resize_bilinear(ops.resize_bilinear(x, 2 * h, 2 * w), h, w)
    down = ops.resize_bilinear(ops.resize_bilinear(x, max(h // 2, 1), max(w // 2, 1)), h, w)
    return ops.concat([x, up, down], axis=0)


def model_input(image: np.ndarray, trick: bool = True, hflip: bool = False) -> np.ndarray:
    """Network input [3, H, W] from a stored single-channel image"""
    image = np.asarray(image, dtype=np.float32)
    if hflip:
        image = image[..., ::-1].copy()
    if image.shape[0] == 3:
        return image
    if trick:
        with no_grad():
            return preprocess_trick(image).data
    return np.repeat(image, 3, axis=0)


class PhantomDataset:
    """Indexable view over a dataset directory that yields network inputs"""

    def __init__(
        self,
        root: Union[str, Path],
        ids: Optional[Sequence[str]] = None,
        preprocess: bool = True,
    ):
        self.manifest, self.root = load_manifest(root)
        self.ids = list(ids) if ids is not None else [s.id for s in self.manifest.samples]
        self.preprocess = preprocess

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    @property
    def class_tiers(self) -> List[str]:
        return list(self.manifest.class_tiers)

    def __len__(self) -> int:
        return len(self.ids)

    def sample(self, index: int) -> Sample:
        return read_sample(self.manifest, self.root, self.ids[index])

    def load(self, index: int, hflip: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """(input [3, H, W] float32, label [H, W] uint8)"""
        s = self.sample(index)
        label = s.label[:, ::-1].copy() if hflip else s.label
        return model_input(s.image, trick=self.preprocess, hflip=hflip), label

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self.load(i)

    def subset(self, ids: Sequence[str]) -> "PhantomDataset":
        view = PhantomDataset.__new__(PhantomDataset)
        view.manifest, view.root, view.preprocess = self.manifest, self.root, self.preprocess
        view.ids = list(ids)
        return view


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def area_band(tier: str) -> Tuple[float, float]:
    """Accepted rasterised area (px) of one organ of a tier"""
    r_lo, r_hi = TIER_RADII[tier]
    # small organs are nearly circular; the elongated tiers may go below pi*r_lo^2
    aspect_floor = 1.0 if tier == "small" else TIER_ASPECT[tier][0]
    low = math.pi * r_lo ** 2 * aspect_floor * (1.0 - AREA_TOLERANCE)
    high = math.pi * r_hi ** 2 * (1.0 + AREA_TOLERANCE)
    return low, high


def ellipse_mask(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    """Pixels whose centres lie inside the rotated ellipse (semi-axes a, b)"""
    yy, xx = np.ogrid[:size, :size]
    dy = yy + 0.5 - cy
    dx = xx + 0.5 - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


@dataclass
class PhantomResult:
    image: np.ndarray
    label: np.ndarray
    layouts: int = 1


def presence_period(presence_prob: float) -> Optional[int]:
    """Every how many images a class is left out (None: never)"""
    absent = 1.0 - presence_prob
    if absent <= 1e-12:
        return None
    return math.ceil(1.0 / absent - 1e-9)


def class_present(spec: PhantomSpec, index: int, class_index: int) -> bool:
    """Whether class ``class_index`` is drawn in sample ``index``.

    Absences fall on every K-th image with K = ceil(1 / (1 - presence_prob)),
    phase-shifted per class and never before image K-1, so any prefix of n
    samples holds each class at least ``presence_prob * n`` times.
    """
    period = presence_period(spec.presence_prob)
    if period is None:
        return True
    step = index + 1 - (spec.seed + class_index) % period
    return not (step >= period and step % period == 0)


def _place_organ(
    rng: np.random.Generator,
    label: np.ndarray,
    organ: OrganClass,
    max_rejections: int,
) -> Optional[np.ndarray]:
    size = label.shape[0]
    r_lo, r_hi = TIER_RADII[organ.tier]
    a_lo, a_hi = TIER_ASPECT[organ.tier]
    low, high = area_band(organ.tier)
    budget = MAX_FOREGROUND_FRACTION * label.size
    used = int((label > 0).sum())
    for _ in range(max_rejections):
        r = rng.uniform(r_lo, r_hi)
        aspect = rng.uniform(a_lo, a_hi)
        theta = rng.uniform(0.0, math.pi)
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        mask = ellipse_mask(size, cy, cx, r, r * aspect, theta)
        area = int(mask.sum())
        if not low <= area <= high:
            continue
        if used + area >= budget:
            continue
        if (label[mask] != 0).any():
            continue
        return mask
    return None


def _layout(rng: np.random.Generator, spec: PhantomSpec, classes: Sequence[int]) -> Tuple[np.ndarray, Optional[str]]:
    """Place ``classes`` in order; returns the label map and the first organ that did not fit"""
    size = spec.image_size
    label = np.zeros((size, size), dtype=np.uint8)
    for c in classes:
        organ = spec.classes[c]
        mask = _place_organ(rng, label, organ, spec.max_rejections)
        if mask is None:
            return label, organ.name
        label[mask] = c + 1
    return label, None


def gen_phantom_sample(spec: PhantomSpec, index: int) -> PhantomResult:
    """Generate sample ``index`` of a phantom set.

    Raises:
        DatasetError: the scheduled organs did not fit in ``max_layouts`` layouts
    """
    rng = stream(spec.seed, index)
    size = spec.image_size
    image = BACKGROUND_LEVEL + rng.normal(0.0, spec.sigma_bg, size=(size, size))

    order = sorted(range(len(spec.classes)), key=lambda c: (TIER_ORDER.index(spec.classes[c].tier), c))
    present = [c for c in order if class_present(spec, index, c)]
    for layouts in range(1, spec.max_layouts + 1):
        label, failed = _layout(rng, spec, present)
        if failed is None:
            break
        logger.debug(f"Sample {index}: {failed} did not fit, layout {layouts} discarded")
    else:
        raise DatasetError(
            f"sample {index}: {failed} could not be placed in {spec.max_layouts} layouts "
            f"of {spec.max_rejections} draws each"
        )

    for c in present:
        organ = spec.classes[c]
        mask = label == c + 1
        image[mask] = rng.normal(organ.intensity_mean, organ.intensity_sigma, size=int(mask.sum()))

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return PhantomResult(image=image[None], label=label, layouts=layouts)


def write_preview(root: Union[str, Path], sample_id: str, image: np.ndarray, label: np.ndarray) -> Path:
    """Grey image and colourised label map side by side as PNG"""
    grey = (np.clip(image[0], 0.0, 1.0) * 255.0).round().astype(np.uint8)
    grey_rgb = np.repeat(grey[..., None], 3, axis=-1)
    colours = _PALETTE[label % len(_PALETTE)]
    colours[label == 0] = grey_rgb[label == 0] // 3
    canvas = np.concatenate([grey_rgb, colours], axis=1)
    path = Path(root) / "previews" / f"{sample_id}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return path


def gen_phantom(spec: PhantomSpec, out_dir: Union[str, Path], previews: bool = False) -> DatasetManifest:
    """Generate ``spec.n`` samples into ``out_dir`` and write the manifest"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        class_names=[c.name for c in spec.classes],
        class_tiers=[c.tier for c in spec.classes],
        seed=spec.seed,
    )
    for i in range(spec.n):
        sample_id = f"{i:05d}"
        result = gen_phantom_sample(spec, i)
        manifest.samples.append(write_sample(out_dir, sample_id, result.image, result.label))
        if result.layouts > 1:
            note = f"sample {sample_id}: placed on layout {result.layouts}"
            manifest.notes.append(note)
            logger.info(note)
        if previews:
            write_preview(out_dir, sample_id, result.image, result.label)
    save_manifest(manifest, out_dir)
    logger.info(f"Generated {spec.n} phantom samples in {out_dir} ({len(manifest.notes)} needed extra layouts)")
    return manifest


__all__ = [
    "MANIFEST_NAME",
    "SampleEntry",
    "DatasetManifest",
    "save_manifest",
    "load_manifest",
    "Sample",
    "SampleBatch",
    "write_sample",
    "read_sample",
    "preprocess_trick",
    "model_input",
    "PhantomDataset",
    "area_band",
    "ellipse_mask",
    "PhantomResult",
    "presence_period",
    "class_present",
    "gen_phantom_sample",
    "write_preview",
    "gen_phantom",
]
