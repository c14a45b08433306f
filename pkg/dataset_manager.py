# dataset_manager.py

"""
Samples, manifests, patient-disjoint splits, augmentation and the synthetic
lesion generator.

A manifest is two CSV files in the ChestX-ray14 layout:

    images.csv  image_path,labels,patient_id     labels are '|'-joined names,
                                                 'No Finding' is the empty set
    boxes.csv   image_id,label,x,y,w,h           pixels, top-left origin

The synthetic generator writes exactly that layout (plus PNG files), so the
training and evaluation code never needs to know where the data came from.
"""

import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image
from scipy import ndimage

from settings import CHESTXRAY14_CLASSES, NO_FINDING

logger = logging.getLogger(__name__)

IMAGES_COLUMNS = ["image_path", "labels", "patient_id"]
BOXES_COLUMNS = ["image_id", "label", "x", "y", "w", "h"]


class ManifestError(ValueError):
    """A manifest row could not be parsed or names an unknown label."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SyntheticConfigError(ValueError):
    pass


# ---------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------
@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixels; (x, y) is the top-left corner."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box extent must be positive, got w={self.w} h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box corner must be non-negative, got x={self.x} y={self.y}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def inside(self, width: float, height: float) -> bool:
        return self.x2 <= width and self.y2 <= height


def label_vector(names: Iterable[str], class_names: Sequence[str]) -> np.ndarray:
    """Multi-hot vector for a collection of class names; 'No Finding' is empty."""
    index = {name: i for i, name in enumerate(class_names)}
    bits = np.zeros(len(class_names), dtype=np.uint8)
    for name in names:
        name = name.strip()
        if not name or name == NO_FINDING:
            continue
        if name not in index:
            raise ManifestError(f"unknown label {name!r}")
        bits[index[name]] = 1
    return bits


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    labels: np.ndarray
    patient_id: str
    gt_boxes: List[Tuple[int, BBox]] = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim != 2 or self.image.shape[0] != self.image.shape[1]:
            raise ValueError(f"{self.sample_id}: image must be a square 2-D grid, got {self.image.shape}")
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValueError(f"{self.sample_id}: image values must lie in [0, 1]")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError(f"{self.sample_id}: labels must be binary")
        side = self.image.shape[0]
        for class_index, box in self.gt_boxes:
            if not 0 <= class_index < len(self.labels):
                raise ValueError(f"{self.sample_id}: box class {class_index} out of range")
            if not box.inside(side, side):
                raise ValueError(f"{self.sample_id}: box {box} outside a {side}x{side} image")

    @property
    def positive_classes(self) -> List[int]:
        return [int(c) for c in np.flatnonzero(self.labels)]

    @property
    def is_no_finding(self) -> bool:
        return not self.labels.any()

    def boxes_for(self, class_index: int) -> List[BBox]:
        return [box for c, box in self.gt_boxes if c == class_index]


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset
    val: frozenset
    test: frozenset = frozenset()

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise ValueError("split sets must be pairwise disjoint")

    def select(self, samples: Sequence[Sample], part: str) -> List[Sample]:
        ids = getattr(self, part)
        return [s for s in samples if s.sample_id in ids]

    def to_json(self) -> str:
        return json.dumps({part: sorted(getattr(self, part)) for part in ("train", "val", "test")}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        data = json.loads(text)
        return cls(frozenset(data["train"]), frozenset(data["val"]), frozenset(data.get("test", [])))


def check_patient_disjoint(split: SplitSpec, samples: Sequence[Sample]) -> bool:
    owner: Dict[str, str] = {}
    for part in ("train", "val", "test"):
        for sample in split.select(samples, part):
            if owner.setdefault(sample.patient_id, part) != part:
                return False
    return True


# ---------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------
def _read_csv(path: str, columns: List[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ManifestError(f"{path}: malformed row", int(match.group(1)) if match else None) from e
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")
    return df


def load_image(path: str, image_size: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """
    Read an image as a grayscale float grid in [0, 1].

    Returns the grid and the scale factor applied to it, so boxes given in
    original pixel coordinates can be moved onto the resized grid.
    """
    with Image.open(path) as im:
        im = im.convert("L")
        scale = 1.0
        if image_size is not None and im.size != (image_size, image_size):
            scale = image_size / im.size[0]
            im = im.resize((image_size, image_size), Image.Resampling.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr, scale


def load_manifest(images_csv: str,
                  boxes_csv: Optional[str] = None,
                  class_names: Sequence[str] = CHESTXRAY14_CLASSES,
                  image_root: Optional[str] = None,
                  image_size: Optional[int] = None) -> List[Sample]:
    """
    Load samples from the two-CSV manifest.

    Image paths are resolved against image_root (default: the directory of
    images_csv). Rows whose image file is missing are logged with their line
    number and left out of the result.
    """
    root = image_root or os.path.dirname(os.path.abspath(images_csv))
    images = _read_csv(images_csv, IMAGES_COLUMNS)

    boxes_by_image: Dict[str, List[Tuple[int, BBox, int]]] = {}
    if boxes_csv:
        index = {name: i for i, name in enumerate(class_names)}
        boxes = _read_csv(boxes_csv, BOXES_COLUMNS)
        for i, row in enumerate(boxes.itertuples(index=False)):
            line = i + 2
            if row.label not in index:
                raise ManifestError(f"unknown label {row.label!r} in {boxes_csv}", line)
            try:
                box = BBox(float(row.x), float(row.y), float(row.w), float(row.h))
            except ValueError as e:
                raise ManifestError(f"bad box in {boxes_csv}: {e}", line) from e
            boxes_by_image.setdefault(row.image_id, []).append((index[row.label], box, line))

    samples = []
    missing = []
    for i, row in enumerate(images.itertuples(index=False)):
        line = i + 2
        if not row.image_path or not row.patient_id:
            raise ManifestError(f"empty image_path or patient_id in {images_csv}", line)
        try:
            labels = label_vector(row.labels.split("|"), class_names)
        except ManifestError as e:
            raise ManifestError(f"{e} in {images_csv}", line) from e

        path = row.image_path if os.path.isabs(row.image_path) else os.path.join(root, row.image_path)
        if not os.path.exists(path):
            missing.append((line, path))
            continue
        image, scale = load_image(path, image_size)
        image_id = os.path.basename(row.image_path)

        gt_boxes = []
        side = image.shape[0]
        for class_index, box, box_line in boxes_by_image.get(image_id, []):
            if scale != 1.0:
                box = BBox(box.x * scale, box.y * scale, box.w * scale, box.h * scale)
            if box.x >= side or box.y >= side:
                raise ManifestError(f"box starts outside the {side}px image {image_id} in {boxes_csv}", box_line)
            if not box.inside(side, side):
                x2, y2 = min(box.x2, side), min(box.y2, side)
                logger.debug(f"Clipping box at line {box_line} of {boxes_csv} to the image")
                box = BBox(box.x, box.y, x2 - box.x, y2 - box.y)
            gt_boxes.append((class_index, box))

        samples.append(Sample(image_id, image, labels, str(row.patient_id), gt_boxes))

    if missing:
        for line, path in missing:
            logger.warning(f"{images_csv} line {line}: image file not found: {path}")
        logger.warning(f"{len(missing)} manifest rows reference missing images")
    logger.info(f"Loaded {len(samples)} samples from {images_csv}")
    return samples


def write_manifest(samples: Sequence[Sample], out_dir: str,
                   class_names: Sequence[str]) -> Tuple[str, str]:
    """Write PNG images plus images.csv / boxes.csv. Returns the two CSV paths."""
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)

    image_rows = []
    box_rows = []
    for s in samples:
        file_name = s.sample_id if s.sample_id.endswith(".png") else f"{s.sample_id}.png"
        pixels = np.round(s.image * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(os.path.join(image_dir, file_name))
        names = [class_names[c] for c in s.positive_classes]
        image_rows.append({
            "image_path": f"images/{file_name}",
            "labels": "|".join(names) if names else NO_FINDING,
            "patient_id": s.patient_id,
        })
        for class_index, box in s.gt_boxes:
            box_rows.append({
                "image_id": file_name, "label": class_names[class_index],
                "x": box.x, "y": box.y, "w": box.w, "h": box.h,
            })

    images_csv = os.path.join(out_dir, "images.csv")
    boxes_csv = os.path.join(out_dir, "boxes.csv")
    pd.DataFrame(image_rows, columns=IMAGES_COLUMNS).to_csv(images_csv, index=False)
    pd.DataFrame(box_rows, columns=BOXES_COLUMNS).to_csv(boxes_csv, index=False)
    with open(os.path.join(out_dir, "classes.txt"), "w") as f:
        f.write("\n".join(class_names) + "\n")
    return images_csv, boxes_csv


def read_class_names(data_dir: str) -> List[str]:
    """Class ordering stored next to a manifest, or the ChestX-ray14 list."""
    path = os.path.join(data_dir, "classes.txt")
    if not os.path.exists(path):
        return list(CHESTXRAY14_CLASSES)
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


# ---------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------
@dataclass
class SplitConfig:
    """Validation and test shares of a fresh split; train gets the rest."""
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.val_fraction < 1 or not 0 <= self.test_fraction < 1 \
                or self.val_fraction + self.test_fraction >= 1:
            raise ValueError(f"invalid split fractions val={self.val_fraction} test={self.test_fraction}")

    @property
    def fractions(self) -> Tuple[float, float]:
        return 1.0 - self.val_fraction - self.test_fraction, self.val_fraction


def split_by_patient(samples: Sequence[Sample],
                     fractions: Tuple[float, float] = (0.7, 0.1),
                     seed: int = 0) -> SplitSpec:
    """
    Patient-disjoint train/val/test split.

    fractions are (train, val); whatever is left over becomes the test set.
    Patients are visited in a seeded random order and placed into val, then
    test, while those still have room; everyone else goes to train.
    """
    train_frac, val_frac = fractions
    if train_frac <= 0 or val_frac <= 0 or train_frac + val_frac > 1.0 + 1e-9:
        raise ValueError(f"invalid split fractions {fractions}")

    by_patient: Dict[str, List[str]] = {}
    for s in samples:
        by_patient.setdefault(s.patient_id, []).append(s.sample_id)

    n = len(samples)
    targets = {"val": int(round(val_frac * n)), "test": int(round(max(0.0, 1.0 - train_frac - val_frac) * n))}
    counts = {"val": 0, "test": 0}
    parts: Dict[str, set] = {"train": set(), "val": set(), "test": set()}

    rng = np.random.default_rng(seed)
    patients = sorted(by_patient)
    for i in rng.permutation(len(patients)):
        ids = by_patient[patients[i]]
        placed = "train"
        for part in ("val", "test"):
            if counts[part] + len(ids) <= targets[part]:
                placed = part
                break
        else:
            too_big = [p for p in ("val", "test") if targets[p] > 0 and len(ids) > targets[p]]
            if too_big:
                logger.warning(f"Patient {patients[i]} owns {len(ids)} samples, more than the "
                               f"{'/'.join(too_big)} split allows; placing in train")
        if placed != "train":
            counts[placed] += len(ids)
        parts[placed].update(ids)

    return SplitSpec(frozenset(parts["train"]), frozenset(parts["val"]), frozenset(parts["test"]))


def carve_validation(train_samples: Sequence[Sample], val_fraction: float = 0.1,
                     seed: int = 0) -> SplitSpec:
    """For data that already comes with a test list: take val out of train only."""
    split = split_by_patient(train_samples, (1.0 - val_fraction, val_fraction), seed)
    return SplitSpec(split.train | split.test, split.val, frozenset())


# ---------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------
@dataclass
class AugmentConfig:
    max_rotation_deg: float = 5.0
    hflip_prob: float = 0.5


def augment(sample: Sample, rng: np.random.Generator,
            config: Optional[AugmentConfig] = None) -> Sample:
    """Random rotation (bilinear, zero fill) and horizontal flip; boxes are dropped."""
    config = config or AugmentConfig()
    image = sample.image
    angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg) if config.max_rotation_deg > 0 else 0.0
    flip = rng.random() < config.hflip_prob

    if angle != 0.0:
        image = ndimage.rotate(image, angle, reshape=False, order=1, mode="constant", cval=0.0)
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if flip:
        image = np.ascontiguousarray(image[:, ::-1])
    return Sample(sample.sample_id, image, sample.labels.copy(), sample.patient_id, [])


# ---------------------------------------------------------------------
# Synthetic lesions
# ---------------------------------------------------------------------
def _grid(s: int) -> Tuple[np.ndarray, np.ndarray, float]:
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    return yy, xx, (s - 1) / 2.0


def _disc(s):
    yy, xx, c = _grid(s)
    return (xx - c) ** 2 + (yy - c) ** 2 <= (s / 2.0) ** 2


def _ring(s):
    yy, xx, c = _grid(s)
    r2 = (xx - c) ** 2 + (yy - c) ** 2
    inner = s / 2.0 - max(2.0, s / 5.0)
    return (r2 <= (s / 2.0) ** 2) & (r2 >= inner ** 2)


def _cross(s):
    yy, xx, c = _grid(s)
    arm = max(1.0, s / 6.0)
    return (np.abs(xx - c) <= arm) | (np.abs(yy - c) <= arm)


def _hbar(s):
    yy, xx, c = _grid(s)
    return np.abs(yy - c) <= max(1.0, s / 6.0)


def _vbar(s):
    return _hbar(s).T


def _checker(s):
    yy, xx, _ = _grid(s)
    k = max(2, s // 4)
    return ((xx // k + yy // k) % 2) == 0


def _triangle(s):
    yy, xx, c = _grid(s)
    return np.abs(xx - c) <= yy / 2.0 + 0.5


def _diamond(s):
    yy, xx, c = _grid(s)
    return np.abs(xx - c) + np.abs(yy - c) <= s / 2.0


def _xcross(s):
    yy, xx, _ = _grid(s)
    t = max(1.0, s / 8.0)
    return (np.abs(xx - yy) <= t) | (np.abs(xx + yy - (s - 1)) <= t)


def _frame(s):
    yy, xx, _ = _grid(s)
    edge = np.minimum(np.minimum(xx, yy), np.minimum(s - 1 - xx, s - 1 - yy))
    return edge < max(2, s // 6)


GLYPHS = {
    "disc": _disc, "ring": _ring, "cross": _cross, "bar": _hbar, "checker": _checker,
    "triangle": _triangle, "diamond": _diamond, "pillar": _vbar, "saltire": _xcross, "frame": _frame,
}
GLYPH_FAMILIES = list(GLYPHS)


@dataclass
class SyntheticConfig:
    n_samples: int = 2500
    num_classes: int = 5
    image_size: int = 64
    min_scale: float = 0.2        # glyph side as a fraction of image_size
    max_scale: float = 0.4
    label_prob: float = 0.25      # independent per-class Bernoulli
    class_probs: Optional[List[float]] = None
    no_finding_frac: float = 0.15
    noise_level: float = 0.1

    def __post_init__(self):
        if self.num_classes < 2:
            raise SyntheticConfigError("need at least 2 classes")
        if self.num_classes > len(GLYPH_FAMILIES):
            raise SyntheticConfigError(f"only {len(GLYPH_FAMILIES)} distinct glyph families exist, "
                                       f"asked for {self.num_classes} classes")
        if self.image_size < 32:
            raise SyntheticConfigError(f"image_size must be >= 32, got {self.image_size}")
        if not 0 < self.min_scale <= self.max_scale:
            raise SyntheticConfigError(f"bad glyph scale range ({self.min_scale}, {self.max_scale})")
        if self.max_scale * self.image_size > self.image_size or self.min_scale * self.image_size < 5:
            raise SyntheticConfigError(f"glyphs of scale ({self.min_scale}, {self.max_scale}) "
                                       f"cannot fit a {self.image_size}px image")
        if self.class_probs is not None and len(self.class_probs) != self.num_classes:
            raise SyntheticConfigError("class_probs must have one entry per class")
        if not 0 <= self.no_finding_frac <= 1 or self.noise_level < 0:
            raise SyntheticConfigError("no_finding_frac must lie in [0, 1] and noise_level be >= 0")

    @property
    def class_names(self) -> List[str]:
        return GLYPH_FAMILIES[:self.num_classes]


def _background(rng: np.random.Generator, config: SyntheticConfig) -> np.ndarray:
    size = config.image_size
    base = np.full((size, size), 0.25)
    if config.noise_level == 0:
        return base
    smooth = ndimage.gaussian_filter(rng.random((size, size)), sigma=2.0)
    smooth = (smooth - smooth.min()) / max(np.ptp(smooth), 1e-12)
    grain = rng.standard_normal((size, size))
    return base + config.noise_level * (smooth - 0.5) + 0.5 * config.noise_level * grain


PLACEMENT_TRIES = 50
SPOT_TRIES = 20


def _overlaps(box: BBox, others: List[BBox]) -> bool:
    return any(box.x < o.x2 + 1 and o.x < box.x2 + 1 and box.y < o.y2 + 1 and o.y < box.y2 + 1 for o in others)


def _layout(classes: Sequence[int], rng: np.random.Generator, size: int, lo: int,
            hi: int) -> Optional[List[Tuple[int, int, int, np.ndarray, BBox]]]:
    """One (class, x0, y0, mask, box) per class with pairwise separated boxes, or None."""
    placed = []
    for class_index in classes:
        glyph = GLYPHS[GLYPH_FAMILIES[class_index]]
        for _ in range(SPOT_TRIES):
            s = int(rng.integers(lo, hi + 1))
            mask = glyph(s)
            rows, cols = np.nonzero(mask)
            x0, y0 = (int(v) for v in rng.integers(0, size - s + 1, size=2))
            box = BBox(x0 + cols.min(), y0 + rows.min(),
                       cols.max() - cols.min() + 1, rows.max() - rows.min() + 1)
            if not _overlaps(box, [p[4] for p in placed]):
                placed.append((int(class_index), x0, y0, mask, box))
                break
        else:
            return None
    return placed


def render_sample(labels: np.ndarray, rng: np.random.Generator, config: SyntheticConfig,
                  sample_id: str, patient_id: str) -> Sample:
    """Render one glyph per present class on textured background."""
    size = config.image_size
    image = _background(rng, config)
    lo = int(round(config.min_scale * size))
    hi = int(round(config.max_scale * size))

    classes = np.flatnonzero(labels)
    for attempt in range(PLACEMENT_TRIES):
        # the largest allowed glyph shrinks toward min_scale as layouts fail
        placed = _layout(classes, rng, size, lo, hi - (hi - lo) * attempt // (PLACEMENT_TRIES - 1))
        if placed is not None:
            break
    else:
        raise SyntheticConfigError(f"no separated layout for classes {classes.tolist()} in {sample_id} "
                                   f"after {PLACEMENT_TRIES} tries")

    gt_boxes: List[Tuple[int, BBox]] = []
    for class_index, x0, y0, mask, box in placed:
        intensity = rng.uniform(0.7, 1.0)
        s = mask.shape[0]
        image[y0:y0 + s, x0:x0 + s][mask] = intensity
        gt_boxes.append((class_index, box))

    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
    return Sample(sample_id, pixels, labels.astype(np.uint8), patient_id, gt_boxes)


def _draw_labels(rng: np.random.Generator, config: SyntheticConfig) -> np.ndarray:
    labels = np.zeros(config.num_classes, dtype=np.uint8)
    if rng.random() < config.no_finding_frac:
        return labels
    probs = np.asarray(config.class_probs if config.class_probs is not None
                       else [config.label_prob] * config.num_classes)
    labels[:] = rng.random(config.num_classes) < probs
    if not labels.any():
        labels[rng.integers(config.num_classes)] = 1
    return labels


def generate_synthetic(config: SyntheticConfig, seed: int = 0) -> List[Sample]:
    """
    Draw n_samples synthetic images. Each sample gets its own random stream
    derived from (seed, index), so any subset can be regenerated alone.
    """
    samples = []
    for i in range(config.n_samples):
        rng = np.random.default_rng([seed, i])
        labels = _draw_labels(rng, config)
        samples.append(render_sample(labels, rng, config, f"syn_{i:05d}.png", f"patient_{i:05d}"))
    n_empty = sum(s.is_no_finding for s in samples)
    logger.info(f"Generated {len(samples)} synthetic samples ({n_empty} with no finding)")
    return samples


# ---------------------------------------------------------------------
# Tensor helpers
# ---------------------------------------------------------------------
def stack_images(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).unsqueeze(1)


def stack_labels(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.float32))
