"""Label ingestion, fundus preprocessing/augmentation and the synthetic blob-lesion dataset."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigError, ImageDecodeError, IngestionError, LabelValidationError

log = logging.getLogger(__name__)

RDR_THRESHOLD = 2
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = (".jpeg", ".jpg", ".png", ".tif", ".tiff")

ID_COLUMNS = ("image_id", "image", "id")
GRADE_COLUMNS = ("grade", "level", "dr_grade")


def rdr_from_grade(grade: int, threshold: int = RDR_THRESHOLD) -> int:
    """Grades beyond mild (moderate, severe, proliferative) are referable."""
    return int(grade >= threshold)


@dataclass(frozen=True)
class LabelRecord:
    image_id: str
    dr_grade: int
    is_rdr: int
    split: str = "train"
    path: Optional[Path] = None


def _find_image(image_dir: Path, image_id: str) -> Optional[Path]:
    for suffix in ("",) + IMAGE_SUFFIXES:
        p = image_dir / f"{image_id}{suffix}"
        if p.is_file():
            return p
    return None


def load_index(
    labels_csv: Union[str, Path],
    image_dir: Union[str, Path],
    split_map: Union[str, Mapping[str, str], None] = None,
    threshold: int = RDR_THRESHOLD,
) -> list[LabelRecord]:
    """Read an EyePacs-style ``image,level`` CSV into :class:`LabelRecord` objects.

    ``split_map`` is either one split name for every row or a mapping from
    image id to split (ids absent from the mapping default to ``train``).
    Without one, an optional ``split`` column is honoured.
    Rows whose image file is missing are skipped and counted in a warning.
    """
    image_dir = Path(image_dir)
    try:
        with open(labels_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
            header = rows[0].keys() if rows else []
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise IngestionError(f"cannot read label file {labels_csv}: {exc}") from exc
    id_col = next((c for c in ID_COLUMNS if c in header), None)
    grade_col = next((c for c in GRADE_COLUMNS if c in header), None)
    if rows and (id_col is None or grade_col is None):
        raise IngestionError(f"{labels_csv}: header must name an image id column and a grade column")

    records, missing = [], 0
    for lineno, row in enumerate(rows, start=2):
        image_id = row[id_col].strip()
        try:
            grade = int(row[grade_col])
        except (TypeError, ValueError):
            raise LabelValidationError(f"{labels_csv}:{lineno}: grade {row[grade_col]!r} is not an integer")
        if not 0 <= grade <= 4:
            raise LabelValidationError(f"{labels_csv}:{lineno}: grade {grade} outside 0-4 for {image_id}")
        if isinstance(split_map, str):
            split = split_map
        elif split_map is None and "split" in header:
            split = row["split"].strip()
        else:
            split = (split_map or {}).get(image_id, "train")
        if split not in SPLITS:
            raise LabelValidationError(f"unknown split {split!r} for {image_id}")
        path = _find_image(image_dir, image_id)
        if path is None:
            missing += 1
            continue
        records.append(LabelRecord(image_id, grade, rdr_from_grade(grade, threshold), split, path))
    if missing:
        log.warning("skipped %d of %d rows with no image file under %s", missing, len(rows), image_dir)
    return records


def load_image(path: Union[str, Path]) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def _to_float(image) -> np.ndarray:
    if isinstance(image, (str, Path)):
        image = load_image(image)
    elif isinstance(image, Image.Image):
        image = np.asarray(image)
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float32) / float(np.iinfo(arr.dtype).max)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def resize_hwc(image: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    squeeze = image.ndim == 2
    arr = image[..., None] if squeeze else image
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None].float()
    kw = {"align_corners": False, "antialias": size[0] < arr.shape[0]} if mode == "bilinear" else {}
    out = F.interpolate(t, size=size, mode=mode, **kw)[0].numpy().transpose(1, 2, 0)
    return out[..., 0] if squeeze else out


def preprocess(image, size: int = 512) -> np.ndarray:
    """Center square crop, bilinear resize to ``size`` x ``size``, values in [0, 1].

    Accepts a path, PIL image or array; returns float32 ``(size, size[, C])``.
    """
    arr = _to_float(image)
    h, w = arr.shape[:2]
    if min(h, w) < 64:
        raise ConfigError(f"image of {h}x{w} is below the 64 px minimum side")
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top : top + side, left : left + side]
    if side != size:
        arr = resize_hwc(arr, (size, size))
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


@dataclass
class AugmentConfig:
    p: float = 0.5
    rotation_deg: float = 15.0
    translate_frac: float = 0.05
    crop_scale: tuple[float, float] = (0.9, 1.0)
    jitter: float = 0.1
    ops: tuple[str, ...] = ("hflip", "vflip", "crop", "jitter", "rotate", "translate")


def _jitter(img: np.ndarray, rng: np.random.Generator, amount: float) -> np.ndarray:
    b, c, s = rng.uniform(1 - amount, 1 + amount, size=3)
    img = img * b
    mean = img.mean()
    img = (img - mean) * c + mean
    if img.ndim == 3 and img.shape[2] == 3:
        gray = img @ np.array([0.299, 0.587, 0.114], dtype=img.dtype)
        img = (img - gray[..., None]) * s + gray[..., None]
    return np.clip(img, 0.0, 1.0)


def augment(
    image: np.ndarray,
    rng: np.random.Generator,
    cfg: Optional[AugmentConfig] = None,
    mask: Optional[np.ndarray] = None,
):
    """Random flips, crop, color jitter, rotation and translation, each with probability ``cfg.p``.

    A lesion ``mask`` rides along as an extra channel through every geometric
    step and is re-binarized at 0.5 at the end, so it stays aligned with the
    image. Returns the image, or ``(image, mask)`` when a mask is given.
    Output dims always equal the input dims.
    """
    cfg = cfg or AugmentConfig()
    img = image.astype(np.float32, copy=True)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    n_img = img.shape[2]
    if mask is not None:
        img = np.concatenate([img, mask.astype(np.float32)[..., None]], axis=2)
    h, w = img.shape[:2]
    # fixed draw order keeps results a function of the seed alone
    fire = {op: rng.random() < cfg.p for op in AugmentConfig.ops}
    fire = {op: fire[op] and op in cfg.ops for op in fire}
    if fire["hflip"]:
        img = img[:, ::-1]
    if fire["vflip"]:
        img = img[::-1]
    if fire["crop"]:
        scale = rng.uniform(*cfg.crop_scale)
        ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
        top, left = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        img = resize_hwc(np.ascontiguousarray(img[top : top + ch, left : left + cw]), (h, w))
    if fire["jitter"]:
        img[..., :n_img] = _jitter(img[..., :n_img], rng, cfg.jitter)
    if fire["rotate"]:
        angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
    if fire["translate"]:
        dy, dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2) * (h, w)
        img = ndimage.shift(img, (dy, dx, 0), order=1, mode="reflect")
    out = np.ascontiguousarray(np.clip(img[..., :n_img], 0.0, 1.0), dtype=np.float32)
    if squeeze:
        out = out[..., 0]
    if mask is None:
        return out
    return out, np.ascontiguousarray(img[..., n_img] >= 0.5).astype(mask.dtype)


# --- synthetic blob-lesion dataset -------------------------------------------------

LESION_RGB = np.array([0.96, 0.88, 0.30], dtype=np.float32)
DISC_RGB = np.array([0.98, 0.80, 0.62], dtype=np.float32)


@dataclass
class SynthConfig:
    n_images: int = 500
    image_size: int = 64
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (2.0, 6.0)
    lesion_contrast_range: tuple[float, float] = (0.4, 1.0)
    background_texture: str = "vignette"
    positive_fraction: float = 0.5
    seed: int = 7
    optic_disc: bool = True

    def validate(self):
        if self.n_images < 1:
            raise ConfigError("n_images must be positive")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ConfigError("lesion_count_range must satisfy 1 <= min <= max")
        rlo, rhi = self.lesion_radius_range
        if not 0 < rlo <= rhi:
            raise ConfigError("lesion_radius_range must satisfy 0 < min <= max")
        if rhi >= self.image_size / 4:
            raise ConfigError(f"lesion radius {rhi} must be below image_size/4 = {self.image_size / 4}")
        clo, chi = self.lesion_contrast_range
        if not 0 < clo <= chi <= 1:
            raise ConfigError("lesion_contrast_range must satisfy 0 < min <= max <= 1")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError("positive_fraction must lie in (0, 1)")
        if self.background_texture not in ("flat", "vignette"):
            raise ConfigError(f"unknown background texture {self.background_texture!r}")


@dataclass
class ArrayDataset:
    """In-memory images ``(N, H, W, 3)`` float32 in [0, 1] with bit labels and optional masks."""

    images: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"img_{i:05d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        mask = None if self.masks is None else self.masks[i]
        return self.images[i], int(self.labels[i]), mask

    def subset(self, idx: Sequence[int]) -> "ArrayDataset":
        idx = list(idx)
        return ArrayDataset(
            self.images[idx],
            self.labels[idx],
            None if self.masks is None else self.masks[idx],
            [self.ids[i] for i in idx],
        )

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])


class FundusDataset:
    """Lazily decoded and preprocessed images behind a list of :class:`LabelRecord`."""

    def __init__(self, records: Sequence[LabelRecord], size: int = 512):
        self.records = list(records)
        self.size = size
        self.ids = [r.image_id for r in self.records]
        self.labels = np.array([r.is_rdr for r in self.records], dtype=np.int64)
        self.masks = None

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        r = self.records[i]
        return preprocess(r.path, self.size), r.is_rdr, None

    @property
    def image_size(self) -> int:
        return self.size


def _smooth_noise(rng, size, sigma, amplitude):
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    n /= np.abs(n).max() + 1e-12
    return (amplitude * n).astype(np.float32)


def _blob(size, cy, cx, radius, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    r = np.hypot(dy, dx)
    boundary = radius * np.ones_like(theta)
    for harmonic in (2, 3):
        boundary += radius * rng.uniform(0.05, 0.2) * np.cos(harmonic * theta + rng.uniform(0, 2 * np.pi))
    return r <= boundary


def _background(cfg: SynthConfig, rng) -> np.ndarray:
    s = cfg.image_size
    base = np.array([0.62, 0.28, 0.12], dtype=np.float32) * rng.uniform(0.85, 1.1)
    img = np.broadcast_to(base, (s, s, 3)).copy()
    img += _smooth_noise(rng, s, s / 10, 0.06)[..., None] * np.array([1.0, 0.6, 0.3], dtype=np.float32)
    if cfg.background_texture == "vignette":
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)
        r2 = ((yy - s / 2) ** 2 + (xx - s / 2) ** 2) / (s / 2) ** 2
        img *= np.clip(1.0 - 0.45 * r2, 0.2, 1.0)[..., None]
    if cfg.optic_disc:
        rd = s * rng.uniform(0.08, 0.11)
        cy, cx = s / 2 + rng.uniform(-0.1, 0.1) * s, rng.choice([0.25, 0.75]) * s
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)
        w = np.clip(1.0 - np.hypot(yy - cy, xx - cx) / rd, 0.0, 1.0) ** 0.5
        img = img * (1 - w[..., None]) + DISC_RGB * w[..., None]
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(cfg: SynthConfig) -> ArrayDataset:
    """Seeded fundus-like images; positives carry irregular bright lesion blobs and their masks."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    s = cfg.image_size
    n_pos = int(math.floor(cfg.n_images * cfg.positive_fraction + 0.5))
    labels = np.zeros(cfg.n_images, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    images = np.empty((cfg.n_images, s, s, 3), dtype=np.float32)
    masks = np.zeros((cfg.n_images, s, s), dtype=np.uint8)
    rmax = cfg.lesion_radius_range[1]
    for i, lab in enumerate(labels):
        img = _background(cfg, rng)
        if lab:
            count = rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1)
            for _ in range(count):
                radius = rng.uniform(*cfg.lesion_radius_range)
                margin = rmax * 1.3 + 1
                cy, cx = rng.uniform(margin, s - margin, size=2)
                blob = _blob(s, cy, cx, radius, rng)
                alpha = rng.uniform(*cfg.lesion_contrast_range)
                img[blob] = (1 - alpha) * img[blob] + alpha * LESION_RGB
                masks[i] |= blob
        images[i] = img
    return ArrayDataset(images, labels, masks, [f"syn_{cfg.seed}_{i:05d}" for i in range(cfg.n_images)])


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def save_image_folder(dataset: ArrayDataset, out_dir: Union[str, Path]) -> Path:
    """Write ``images/*.png``, ``masks/*.png`` and ``index.csv`` (image_id,is_rdr,mask_path)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "is_rdr", "mask_path"])
        for i, image_id in enumerate(dataset.ids):
            Image.fromarray(_to_uint8(dataset.images[i])).save(out / "images" / f"{image_id}.png")
            mask_path = ""
            if dataset.masks is not None:
                mask_path = f"masks/{image_id}.png"
                Image.fromarray(dataset.masks[i].astype(np.uint8) * 255).save(out / mask_path)
            writer.writerow([image_id, int(dataset.labels[i]), mask_path])
    return out / "index.csv"


def load_image_folder(root: Union[str, Path]) -> ArrayDataset:
    root = Path(root)
    index = root / "index.csv"
    try:
        with open(index, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read dataset index {index}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{index} lists no images")
    images, labels, masks, ids = [], [], [], []
    has_masks = all(r.get("mask_path") for r in rows)
    for r in rows:
        path = _find_image(root / "images", r["image_id"])
        if path is None:
            raise IngestionError(f"missing image for {r['image_id']} under {root / 'images'}")
        images.append(_to_float(load_image(path)))
        labels.append(int(r["is_rdr"]))
        ids.append(r["image_id"])
        if has_masks:
            with Image.open(root / r["mask_path"]) as m:
                masks.append((np.asarray(m.convert("L")) > 127).astype(np.uint8))
    return ArrayDataset(
        np.stack(images), np.array(labels, dtype=np.int64), np.stack(masks) if has_masks else None, ids
    )
