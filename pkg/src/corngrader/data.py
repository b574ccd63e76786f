"""Dataset ingestion, stratified splitting, and image transforms.

Datasets live on disk as one directory per class of image files. A manifest
records (path, stage, class, split) rows; splitting is stratified per class
with exact integer arithmetic: val and test each get floor(ratio * n),
except that a count landing exactly on one half rounds up. That convention
reproduces the published 70/15/15 subset totals for every stage.

Transforms: validation preprocessing is resize + scale to [0, 1] + ImageNet
normalization; training adds flips, color jitter, and small rotations ahead
of normalization, all driven by a seeded generator so augmentation is
bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .backbone import STAGE_CLASSES
from .tensor import Tensor

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

# Rec. 601 luma weights, used for contrast/saturation jitter
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Record:
    path: str
    stage: int
    class_label: str
    split: str = ""  # empty until split_manifest assigns one


@dataclass
class DatasetManifest:
    stage: int
    records: list[Record]
    skipped: int = 0

    def __post_init__(self):
        classes = STAGE_CLASSES[self.stage]
        seen = set()
        for r in self.records:
            if r.stage != self.stage:
                raise ValueError(f"record stage {r.stage} != manifest stage {self.stage}")
            if r.class_label not in classes:
                raise ValueError(f"class {r.class_label!r} not valid for stage {self.stage}")
            if r.path in seen:
                raise ValueError(f"duplicate path {r.path}")
            seen.add(r.path)

    @property
    def classes(self) -> tuple:
        return STAGE_CLASSES[self.stage]

    def class_counts(self) -> dict:
        counts = {c: 0 for c in self.classes}
        for r in self.records:
            counts[r.class_label] += 1
        return counts

    def split_records(self, split: str) -> list[Record]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]


def load_rgb(path) -> np.ndarray:
    """Decode an image file to an H,W,3 uint8 array; raises on failure."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except ValueError:
        raise
    except Exception as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc


def build_manifest(root_dir, stage: int) -> DatasetManifest:
    """Scan class-named subdirectories; undecodable files are skipped and
    counted, never fatal."""
    root = Path(root_dir)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    classes = STAGE_CLASSES[stage]
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    for d in subdirs:
        if d.name not in classes:
            raise ValueError(f"unknown class directory {d.name!r} (expected {classes})")
    present = {d.name for d in subdirs}
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"missing class directories: {missing}")

    records, skipped = [], 0
    for d in subdirs:
        for f in sorted(p for p in d.iterdir() if p.is_file()):
            try:
                with Image.open(f) as img:
                    img.verify()
            except Exception:
                skipped += 1
                continue
            records.append(Record(str(f), stage, d.name))
    if not records:
        raise ValueError(f"no decodable images under {root}")
    return DatasetManifest(stage, records, skipped)


def subset_count(n: int, ratio: Fraction) -> int:
    """floor(ratio * n), except an exact half rounds up."""
    exact = ratio * n
    base = exact.numerator // exact.denominator
    return base + 1 if exact - base == Fraction(1, 2) else base


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(x)


def split_manifest(
    manifest: DatasetManifest,
    ratios=(0.70, 0.15, 0.15),
    seed: int = 0,
) -> DatasetManifest:
    """Assign stratified train/val/test splits, deterministic under seed."""
    fr = tuple(_as_fraction(r) for r in ratios)
    if sum(fr) != 1:
        raise ValueError(f"ratios {ratios} do not sum to 1")
    _, r_val, r_test = fr

    by_class: dict[str, list[int]] = {c: [] for c in manifest.classes}
    for i, r in enumerate(manifest.records):
        by_class[r.class_label].append(i)

    assignment = [""] * len(manifest.records)
    for ci, cls in enumerate(manifest.classes):
        indices = by_class[cls]
        n = len(indices)
        if n < 3:
            raise ValueError(f"class {cls!r} has {n} samples; need at least 3 to split")
        n_val = subset_count(n, r_val)
        n_test = subset_count(n, r_test)
        rng = np.random.default_rng(np.random.SeedSequence([seed, manifest.stage, ci]))
        order = rng.permutation(n)
        for j in order[:n_val]:
            assignment[indices[j]] = "val"
        for j in order[n_val : n_val + n_test]:
            assignment[indices[j]] = "test"
        for j in order[n_val + n_test :]:
            assignment[indices[j]] = "train"

    records = [replace(r, split=s) for r, s in zip(manifest.records, assignment)]
    return DatasetManifest(manifest.stage, records, manifest.skipped)


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "stage", "class", "split"])
        for r in manifest.records:
            writer.writerow([r.path, r.stage, r.class_label, r.split])


def load_manifest(path) -> DatasetManifest:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "stage", "class", "split"]:
            raise ValueError(f"bad manifest header {header}")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError("empty manifest")
    stage = int(rows[0][1])
    records = [Record(p, int(s), c, sp) for p, s, c, sp in rows]
    return DatasetManifest(stage, records)


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip: bool = True
    vertical_flip: bool = True
    jitter: float = 0.2
    rotation_degrees: float = 15.0

    def to_dict(self) -> dict:
        return {
            "horizontal_flip": self.horizontal_flip,
            "vertical_flip": self.vertical_flip,
            "jitter": self.jitter,
            "rotation_degrees": self.rotation_degrees,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(**d)


def _to_float_rgb(image) -> np.ndarray:
    """H,W,3 uint8 or float array -> float32 in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H,W,3 RGB array, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32)


def resize_bilinear(image: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize to resolution x resolution; exact no-op if already there."""
    h, w = image.shape[:2]
    if (h, w) == (resolution, resolution):
        return image
    pil = Image.fromarray((np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
    out = pil.resize((resolution, resolution), Image.BILINEAR)
    return np.asarray(out).astype(np.float32) / 255.0


def normalize(image: np.ndarray) -> Tensor:
    """H,W,3 float [0,1] -> channel-first Tensor with ImageNet statistics."""
    out = (image - IMAGENET_MEAN) / IMAGENET_STD
    return Tensor(np.ascontiguousarray(out.transpose(2, 0, 1)))


def denormalize(tensor) -> np.ndarray:
    """Inverse of normalize: back to H,W,3 float in [0,1] space."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    return arr.transpose(1, 2, 0) * IMAGENET_STD + IMAGENET_MEAN


def val_transforms(image, resolution: int = 384) -> Tensor:
    """Deterministic eval preprocessing: resize, scale, normalize."""
    return normalize(resize_bilinear(_to_float_rgb(image), resolution))


def _jitter_brightness(x: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(x * factor, 0.0, 1.0)


def _jitter_contrast(x: np.ndarray, factor: float) -> np.ndarray:
    mean = float((x @ LUMA).mean())
    return np.clip((x - mean) * factor + mean, 0.0, 1.0)


def _jitter_saturation(x: np.ndarray, factor: float) -> np.ndarray:
    luma = (x @ LUMA)[..., None]
    return np.clip(luma + (x - luma) * factor, 0.0, 1.0)


def train_transforms(
    image,
    rng: np.random.Generator,
    resolution: int = 384,
    augment: AugmentConfig = AugmentConfig(),
) -> Tensor:
    """Stochastic training preprocessing; bit-reproducible given the rng state.

    Order: resize, flips, color jitter, rotation, normalize. Each augmentation
    short-circuits when its drawn parameter is the identity, so a run of
    identity draws reproduces val_transforms exactly.
    """
    x = resize_bilinear(_to_float_rgb(image), resolution)
    if augment.horizontal_flip and rng.random() < 0.5:
        x = x[:, ::-1, :]
    if augment.vertical_flip and rng.random() < 0.5:
        x = x[::-1, :, :]
    if augment.jitter > 0:
        j = augment.jitter
        for op in (_jitter_brightness, _jitter_contrast, _jitter_saturation):
            factor = float(rng.uniform(1.0 - j, 1.0 + j))
            if factor != 1.0:
                x = op(x, factor)
    if augment.rotation_degrees > 0:
        angle = float(rng.uniform(-augment.rotation_degrees, augment.rotation_degrees))
        if angle != 0.0:
            x = ndimage.rotate(
                x, angle, axes=(1, 0), reshape=False, order=1, mode="nearest"
            ).astype(np.float32)
    return normalize(np.ascontiguousarray(x))


def augment_rng(seed: int, stage: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream per (seed, stage, epoch, sample); reused streams
    reproduce bit-identical augmentations."""
    return np.random.default_rng(np.random.SeedSequence([seed, stage, epoch, index]))


# ---------------------------------------------------------------------------
# in-memory split arrays and the synthetic dataset
# ---------------------------------------------------------------------------


@dataclass
class SplitArrays:
    """Decoded images (H,W,3 uint8) and integer labels for each split."""

    train_images: list = field(default_factory=list)
    train_labels: list = field(default_factory=list)
    val_images: list = field(default_factory=list)
    val_labels: list = field(default_factory=list)
    test_images: list = field(default_factory=list)
    test_labels: list = field(default_factory=list)

    def get(self, split: str) -> tuple[list, list]:
        return {
            "train": (self.train_images, self.train_labels),
            "val": (self.val_images, self.val_labels),
            "test": (self.test_images, self.test_labels),
        }[split]


def load_split_arrays(manifest: DatasetManifest) -> SplitArrays:
    """Decode every image in the manifest into memory, grouped by split."""
    classes = manifest.classes
    out = SplitArrays()
    for r in manifest.records:
        if r.split not in SPLITS:
            raise ValueError(f"record {r.path} has no split assignment")
        images, labels = out.get(r.split)
        images.append(load_rgb(r.path))
        labels.append(classes.index(r.class_label))
    return out


def blob_image(
    rng: np.random.Generator, resolution: int = 64, top: bool = True
) -> np.ndarray:
    """One synthetic sample: noisy gray field with a bright Gaussian blob in
    the top or bottom half."""
    r = resolution
    base = np.full((r, r), 0.25, dtype=np.float32)
    cy_lo, cy_hi = (r * 0.03, r * 0.15) if top else (r * 0.85, r * 0.97)
    cy = rng.uniform(cy_lo, cy_hi)
    cx = rng.uniform(r * 0.28, r * 0.72)
    sigma = rng.uniform(r * 0.09, r * 0.14)
    amp = rng.uniform(0.85, 1.00)
    yy, xx = np.mgrid[0:r, 0:r]
    blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma**2))
    field_ = base + blob + rng.normal(0.0, 0.05, size=(r, r))
    gray = np.clip(field_, 0.0, 1.0)
    rgb = np.stack([gray, gray, gray], axis=-1)
    return (rgb * 255.0 + 0.5).astype(np.uint8)


def generate_blob_dataset(
    seed: int = 0,
    resolution: int = 64,
    n_train: int = 400,
    n_val: int = 100,
    n_test: int = 100,
) -> SplitArrays:
    """Balanced two-class synthetic dataset; class 0 = blob in the bottom
    half, class 1 = blob in the top half."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B]))
    out = SplitArrays()
    for split, total in (("train", n_train), ("val", n_val), ("test", n_test)):
        images, labels = out.get(split)
        for i in range(total):
            label = i % 2
            images.append(blob_image(rng, resolution, top=bool(label)))
            labels.append(label)
    return out


def write_blob_dataset(
    out_dir,
    stage: int = 3,
    seed: int = 0,
    resolution: int = 64,
    n_train: int = 400,
    n_val: int = 100,
    n_test: int = 100,
) -> DatasetManifest:
    """Materialize the synthetic dataset as PNG files plus a split manifest."""
    out_dir = Path(out_dir)
    classes = STAGE_CLASSES[stage]
    arrays = generate_blob_dataset(seed, resolution, n_train, n_val, n_test)
    for c in classes:
        (out_dir / c).mkdir(parents=True, exist_ok=True)
    records = []
    counter = 0
    for split in SPLITS:
        images, labels = arrays.get(split)
        for img, label in zip(images, labels):
            cls = classes[label]
            path = out_dir / cls / f"img_{counter:05d}.png"
            Image.fromarray(img).save(path)
            records.append(Record(str(path), stage, cls, split))
            counter += 1
    manifest = DatasetManifest(stage, records)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
