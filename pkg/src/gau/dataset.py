"""Manifest ingestion, patient-level splitting, pair sampling and synthetic shapes.

Images live in memory as float32 arrays shaped (N, H, W, 3) with values in
[0, 1].  Batches handed to the networks are converted to NCHW.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.signal import fftconvolve

MANIFEST_COLUMNS = ("path", "class", "patient_id")
SHAPES = ("disc", "square", "cross", "triangle", "ring", "hbar", "vbar", "diamond", "xshape", "frame")
BACKGROUND = 0.15
FOREGROUND = 0.85


class ManifestError(ValueError):
    """A manifest row could not be ingested."""


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    class_id: int
    patient_id: str


@dataclass
class ImageSet:
    records: list[SampleRecord]
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    num_classes: int

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.class_id for r in self.records], dtype=np.int64)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet([self.records[i] for i in indices], self.images[indices], self.num_classes)

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass
class DatasetSplit:
    train: list[SampleRecord]
    val: list[SampleRecord]
    test: list[SampleRecord]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0


@dataclass
class ConditionalBatch:
    class_id: int
    idx_i: np.ndarray
    idx_j: np.ndarray
    x_i: np.ndarray  # (m, 3, H, W)
    x_j: np.ndarray

    def __len__(self):
        return len(self.idx_i)


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2)))


def to_nhwc(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(images, (0, 2, 3, 1)))


# -- image I/O ----------------------------------------------------------------


def read_image(path: str | os.PathLike, image_size: int) -> np.ndarray:
    """Decode, convert to 3 channels, bilinear-resize and scale to [0, 1]."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "I", "I;16", "F", "1", "P", "LA"):
            gray = im.convert("F") if im.mode != "P" else im.convert("RGB").convert("F")
            if im.mode in ("I", "I;16"):
                scale = 65535.0
            else:
                scale = 255.0
            planes = [gray] * 3
        else:
            rgb = im.convert("RGB")
            planes = [band.convert("F") for band in rgb.split()]
            scale = 255.0
    out = np.empty((image_size, image_size, 3), dtype=np.float32)
    for c, plane in enumerate(planes):
        if plane.size != (image_size, image_size):
            plane = plane.resize((image_size, image_size), Image.BILINEAR)
        out[..., c] = np.asarray(plane, dtype=np.float32) / scale
    return np.clip(out, 0.0, 1.0)


def write_png(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an (H, W, 3) image in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_manifest(path: str | os.PathLike, image_size: int = 64,
                  num_classes: int | None = None) -> ImageSet:
    """Read a ``path,class,patient_id`` manifest and decode every image.

    Relative image paths resolve against the manifest's directory.  Errors
    name the offending row (1-based, header is row 1).
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records, images = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:3]) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, "
                                f"got {reader.fieldnames}")
        for row_no, row in enumerate(reader, start=2):
            where = f"{path}, row {row_no}"
            try:
                class_id = int(row["class"])
            except (TypeError, ValueError):
                raise ManifestError(f"{where}: unknown class {row['class']!r}") from None
            if class_id < 0 or (num_classes is not None and class_id >= num_classes):
                raise ManifestError(f"{where}: unknown class {class_id}")
            img_path = Path(row["path"])
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            if not img_path.is_file():
                raise ManifestError(f"{where}: missing image file {img_path}")
            try:
                images.append(read_image(img_path, image_size))
            except (OSError, ValueError) as exc:
                raise ManifestError(f"{where}: cannot decode {img_path}: {exc}") from None
            records.append(SampleRecord(row["path"], class_id, row["patient_id"]))
    if not records:
        raise ManifestError(f"{path}: manifest has no rows")
    if num_classes is None:
        num_classes = max(r.class_id for r in records) + 1
    return ImageSet(records, np.stack(images), num_classes)


def write_manifest(path: str | os.PathLike, records: list[SampleRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.image_path, r.class_id, r.patient_id])


# -- splitting and sampling ---------------------------------------------------


def split_patient_level(records: list[SampleRecord], ratios=(0.7, 0.1, 0.2),
                        seed: int = 0) -> DatasetSplit:
    """Partition records into train/val/test without splitting any patient.

    Patients are shuffled by ``seed`` and laid end to end; each patient goes
    to the split whose target interval contains the midpoint of its record
    run.  Every split fraction is then within (max records per patient) /
    (total records) of its target ratio.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    by_patient: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_patient.setdefault(r.patient_id, []).append(i)
    if len(by_patient) < 3:
        raise ValueError(f"need at least 3 distinct patients to split, got {len(by_patient)}")

    patients = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(patients))
    total = len(records)
    # doubled boundaries keep the midpoint comparison in exact arithmetic
    bound_train = 2 * ratios[0] * total
    bound_val = 2 * (ratios[0] + ratios[1]) * total
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    seen = 0
    for p in order:
        idx = by_patient[patients[p]]
        mid2 = 2 * seen + len(idx)
        k = 0 if mid2 <= bound_train else (1 if mid2 <= bound_val else 2)
        parts[k].extend(idx)
        seen += len(idx)
    idx_arrays = [np.array(sorted(part), dtype=np.int64) for part in parts]
    return DatasetSplit(*([records[i] for i in a] for a in idx_arrays), *idx_arrays,
                        ratios=ratios, seed=seed)


def sample_conditional_batch(data: ImageSet, class_id: int, m: int,
                             rng: np.random.Generator) -> ConditionalBatch:
    """Draw ``m`` ordered pairs of distinct same-class samples, uniformly."""
    pool = data.class_indices(class_id)
    if len(pool) < 2:
        raise ValueError(f"class {class_id} has {len(pool)} samples; need at least 2 for a pair")
    a = rng.integers(len(pool), size=m)
    b = rng.integers(len(pool) - 1, size=m)
    b = b + (b >= a)
    idx_i, idx_j = pool[a], pool[b]
    return ConditionalBatch(class_id, idx_i, idx_j,
                            to_nchw(data.images[idx_i]), to_nchw(data.images[idx_j]))


# -- synthetic shapes -----------------------------------------------------------


def shape_mask(shape: str, size: int, cx: int, cy: int, r: int) -> np.ndarray:
    """Boolean mask of a parametric shape centred at (cx, cy) with radius r."""
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    adx, ady = np.abs(dx), np.abs(dy)
    t = max(1.0, r / 3.0)
    if shape == "disc":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (adx <= 0.8 * r) & (ady <= 0.8 * r)
    if shape == "cross":
        return ((adx <= t) & (ady <= r)) | ((ady <= t) & (adx <= r))
    if shape == "triangle":
        return (dy <= 0.8 * r) & (2 * adx <= dy + r)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "hbar":
        return (ady <= t) & (adx <= r)
    if shape == "vbar":
        return (adx <= t) & (ady <= r)
    if shape == "diamond":
        return adx + ady <= r
    if shape == "xshape":
        return ((np.abs(dx - dy) <= 0.7 * t) | (np.abs(dx + dy) <= 0.7 * t)) & (adx <= 0.8 * r) & (ady <= 0.8 * r)
    if shape == "frame":
        return (adx <= 0.8 * r) & (ady <= 0.8 * r) & ~((adx <= 0.45 * r) & (ady <= 0.45 * r))
    raise ValueError(f"unknown shape {shape!r}")


def radius_range(image_size: int) -> range:
    return range(max(2, image_size // 8), max(3, image_size // 4) + 1)


def _margin(r: int) -> int:
    return max(2, r // 3)


def render_shape(class_id: int, image_size: int, cx: int, cy: int, r: int) -> np.ndarray:
    mask = shape_mask(SHAPES[class_id], image_size, cx, cy, r)
    img = np.where(mask, FOREGROUND, BACKGROUND).astype(np.float32)
    return np.repeat(img[..., None], 3, axis=-1)


def make_synthetic_dataset(num_classes: int = 2, n_per_class: int = 500, image_size: int = 64,
                           noise_sigma: float = 0.05, seed: int = 0) -> ImageSet:
    """Render ``num_classes`` parametric shapes at random integer positions and radii.

    Pixel noise is Gaussian, clipped to [0, 1].  Every image gets its own
    synthetic patient id, and the record paths are the file names
    :func:`write_image_set` would use.
    """
    if not 2 <= num_classes <= len(SHAPES):
        raise ValueError(f"num_classes must lie in [2, {len(SHAPES)}], got {num_classes}")
    rng = np.random.default_rng(seed)
    radii = radius_range(image_size)
    records, images = [], []
    for c in range(num_classes):
        for k in range(n_per_class):
            r = int(rng.integers(radii.start, radii.stop))
            lo, hi = r + _margin(r), image_size - 1 - r - _margin(r)
            cx, cy = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            img = render_shape(c, image_size, cx, cy, r)
            if noise_sigma > 0:
                img = img + rng.normal(0.0, noise_sigma, size=img.shape[:2])[..., None].astype(np.float32)
            images.append(np.clip(img, 0.0, 1.0))
            n = len(records)
            records.append(SampleRecord(f"images/{c}_{k:05d}.png", c, f"synth-{n:06d}"))
    return ImageSet(records, np.stack(images).astype(np.float32), num_classes)


def write_image_set(data: ImageSet, out_dir: str | os.PathLike,
                    manifest_name: str = "manifest.csv") -> Path:
    """Write every image as PNG under ``out_dir`` plus a manifest; returns its path."""
    out_dir = Path(out_dir)
    for rec, img in zip(data.records, data.images):
        p = out_dir / rec.image_path
        p.parent.mkdir(parents=True, exist_ok=True)
        write_png(p, img)
    manifest = out_dir / manifest_name
    write_manifest(manifest, data.records)
    return manifest


@dataclass
class TemplateOracle:
    """Normalized cross-correlation against every rendered shape template.

    Templates cover each class at every radius the generator draws; the
    correlation is maximized over all integer positions, so a noiseless
    render matches its own template with correlation 1.
    """

    num_classes: int
    image_size: int
    templates: list = field(default_factory=list)

    def __post_init__(self):
        for r in radius_range(self.image_size):
            half = r + _margin(r)
            side = 2 * half + 1
            for c in range(self.num_classes):
                t = shape_mask(SHAPES[c], side, half, half, r).astype(np.float64)
                t -= t.mean()
                t /= np.linalg.norm(t)
                self.templates.append((c, side, t[::-1, ::-1].copy()))

    def scores(self, image: np.ndarray) -> np.ndarray:
        """Best correlation per class for one (H, W, 3) or (H, W) image."""
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=-1)
        best = np.full(self.num_classes, -np.inf)
        cache = {}
        for c, side, t in self.templates:
            if side not in cache:
                box = np.ones((side, side))
                s1 = fftconvolve(img, box, mode="valid")
                s2 = fftconvolve(img * img, box, mode="valid")
                var = np.maximum(s2 - s1 * s1 / (side * side), 1e-12)
                cache[side] = np.sqrt(var)
            corr = fftconvolve(img, t, mode="valid") / cache[side]
            best[c] = max(best[c], float(corr.max()))
        return best

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.array([int(np.argmax(self.scores(im))) for im in images], dtype=np.int64)

    def accuracy(self, data: ImageSet) -> float:
        return float(np.mean(self.predict(data.images) == data.labels))
