"""Dataset loading, synthetic data, partitioning, augmentation and batching.

Folder layouts
--------------
``tn3k`` and ``synthetic`` datasets live in ``root/images/`` with masks of the
same basename in ``root/masks/``.  ``busi`` keeps the two lesion classes in
``root/benign/`` and ``root/malignant/``; a mask shares the image name plus a
``_mask`` suffix, and additional ``_mask_1``, ``_mask_2`` sheets are merged by
union.  Normal (lesion-free) BUSI scans are not used and a ``normal/`` folder
is ignored if present.

Images load as grayscale float32 in [0, 1].  Masks binarize at half of full
scale, so {0, 255} files come back as {0, 1}.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import cv2
import numpy as np

ALLOWED_FRACTIONS = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))
SOURCES = ("tn3k", "busi", "synthetic")
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

MANIFEST_VERSION = 1


@dataclass
class ImageRecord:
    """One grayscale scan with an optional binary lesion mask."""

    id: str
    image: np.ndarray
    mask: np.ndarray | None
    source: str

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r} for record {self.id!r}")
        if self.image.ndim != 2:
            raise ValueError(f"record {self.id!r}: image must be HxW, got shape {self.image.shape}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(
                    f"record {self.id!r}: mask shape {self.mask.shape} != image shape {self.image.shape}"
                )
            values = np.unique(self.mask)
            if not np.isin(values, (0, 1)).all():
                raise ValueError(f"record {self.id!r}: mask must be binary, found values {values[:8]}")


@dataclass(frozen=True)
class AugmentationParams:
    """Resize, random rotation, random scale, then random crop."""

    resize_to: int = 320
    crop_to: int = 256
    rotation: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.25)

    def __post_init__(self) -> None:
        if self.crop_to > self.resize_to:
            raise ValueError(f"crop_to {self.crop_to} exceeds resize_to {self.resize_to}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"invalid scale_range {self.scale_range}")
        if self.rotation < 0.0:
            raise ValueError("rotation must be non-negative")


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint id lists: labeled/unlabeled training pools plus val and test."""

    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    fraction: Fraction
    seed: int

    def __post_init__(self) -> None:
        groups = (self.labeled_ids, self.unlabeled_ids, self.val_ids, self.test_ids)
        seen: set[str] = set()
        for group in groups:
            for rid in group:
                if rid in seen:
                    raise ValueError(f"id {rid!r} appears in more than one split group")
                seen.add(rid)
        if not self.labeled_ids:
            raise ValueError("labeled pool is empty")

    @property
    def train_pool(self) -> tuple[str, ...]:
        return self.labeled_ids + self.unlabeled_ids


def _is_image_file(path: Path) -> bool:
    return path.suffix.lower() in _IMAGE_SUFFIXES


def _read_gray(path: Path) -> np.ndarray:
    data = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if data is None:
        raise ValueError(f"unreadable image file: {path}")
    return data.astype(np.float32) / 255.0


def _read_mask(path: Path) -> np.ndarray:
    # Threshold at half of full scale: {0, 255} -> {0, 1}.
    return (_read_gray(path) > 0.5).astype(np.uint8)


def _load_paired_dir(root: Path, source: str) -> list[ImageRecord]:
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {image_dir}")
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"missing masks directory: {mask_dir}")
    mask_by_stem = {p.stem: p for p in sorted(mask_dir.iterdir()) if _is_image_file(p)}
    records = []
    for image_path in sorted(image_dir.iterdir()):
        if not _is_image_file(image_path):
            continue
        mask_path = mask_by_stem.pop(image_path.stem, None)
        if mask_path is None:
            raise FileNotFoundError(f"no mask for image: {image_path}")
        records.append(
            ImageRecord(image_path.stem, _read_gray(image_path), _read_mask(mask_path), source)
        )
    if mask_by_stem:
        orphan = next(iter(mask_by_stem.values()))
        raise FileNotFoundError(f"mask without matching image: {orphan}")
    if not records:
        raise ValueError(f"no images found under {image_dir}")
    return records


def _load_busi(root: Path) -> list[ImageRecord]:
    records = []
    for class_name in ("benign", "malignant"):
        class_dir = root / class_name
        if not class_dir.is_dir():
            raise FileNotFoundError(f"missing BUSI class directory: {class_dir}")
        files = [p for p in sorted(class_dir.iterdir()) if _is_image_file(p)]
        images = [p for p in files if "_mask" not in p.stem]
        masks = [p for p in files if "_mask" in p.stem]
        mask_lookup: dict[str, list[Path]] = {}
        for p in masks:
            stem = p.stem.split("_mask")[0]
            mask_lookup.setdefault(stem, []).append(p)
        for image_path in images:
            sheets = mask_lookup.pop(image_path.stem, None)
            if not sheets:
                raise FileNotFoundError(f"no mask for image: {image_path}")
            mask = _read_mask(sheets[0])
            for extra in sheets[1:]:
                extra_mask = _read_mask(extra)
                if extra_mask.shape != mask.shape:
                    raise ValueError(f"mask sheet shape mismatch for image: {image_path}")
                mask = np.maximum(mask, extra_mask)
            records.append(
                ImageRecord(f"{class_name}/{image_path.stem}", _read_gray(image_path), mask, "busi")
            )
        if mask_lookup:
            stem = next(iter(mask_lookup))
            raise FileNotFoundError(f"mask without matching image in {class_dir}: {stem}")
    if not records:
        raise ValueError(f"no BUSI images found under {root}")
    return records


def load_dataset(root: str | Path, layout: str) -> list[ImageRecord]:
    """Load every record under ``root`` for the given layout (one of SOURCES)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    if layout == "busi":
        return _load_busi(root)
    if layout in ("tn3k", "synthetic"):
        return _load_paired_dir(root, layout)
    raise ValueError(f"unknown dataset layout {layout!r}; expected one of {SOURCES}")


def _smooth_field(rng: np.random.Generator, canvas: int, sigma: float) -> np.ndarray:
    """Zero-mean unit-std smoothed noise field used for texture and speckle."""
    noise = rng.standard_normal((canvas, canvas)).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigma)
    noise -= noise.mean()
    std = float(noise.std())
    if std > 0.0:
        noise /= std
    return noise


def generate_synthetic(
    count: int,
    canvas: int,
    seed: int,
    contrast_range: tuple[float, float] = (0.24, 0.40),
    speckle_strength: float = 0.30,
    shadow_prob: float = 0.0,
    shadow_strength: tuple[float, float] = (0.35, 0.65),
) -> list[ImageRecord]:
    """Synthesize ultrasound-like scans: bright smooth blobs over speckled texture.

    Each mask is the union of one to three overlapping ellipses whose outline
    is smoothed by blur-and-rethreshold.  Identical arguments always produce
    identical records.  Lower contrast or stronger speckle makes the task
    harder without changing the mask distribution; ``shadow_prob`` adds
    acoustic-shadow streaks, dark bands that cross the scan (and the lesion)
    the way rib or calcification shadows do.  Shadows darken the image only,
    never the mask: the lesion is still there, just harder to see.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if canvas < 64:
        raise ValueError("canvas must be >= 64")
    if not 0.0 < contrast_range[0] <= contrast_range[1]:
        raise ValueError("contrast_range must be increasing and positive")
    if speckle_strength < 0.0:
        raise ValueError("speckle_strength must be >= 0")
    if not 0.0 <= shadow_prob <= 1.0:
        raise ValueError("shadow_prob must be in [0, 1]")
    if not 0.0 < shadow_strength[0] <= shadow_strength[1] <= 1.0:
        raise ValueError("shadow_strength must be increasing, within (0, 1]")
    rng = np.random.default_rng(seed)
    if shadow_prob > 0.0:
        # dedicated stream: shadow settings never shift the draws behind
        # masks, contrast or speckle, so those stay seed-stable
        shadow_rng = np.random.default_rng((seed, 0x5AD0))
        yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float32)
    records = []
    for index in range(count):
        mask = np.zeros((canvas, canvas), np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.22 * canvas, 0.78 * canvas, size=2)
            semi_a = rng.uniform(0.10, 0.26) * canvas
            semi_b = semi_a * rng.uniform(0.45, 1.0)
            angle = rng.uniform(0.0, 180.0)
            cv2.ellipse(
                mask,
                (int(round(cx)), int(round(cy))),
                (max(3, int(round(semi_a))), max(3, int(round(semi_b)))),
                float(angle),
                0,
                360,
                1,
                thickness=-1,
            )
        soft = cv2.GaussianBlur(mask.astype(np.float32), (0, 0), 0.02 * canvas)
        mask = (soft > 0.5).astype(np.uint8)

        halo = cv2.GaussianBlur(mask.astype(np.float32), (0, 0), 0.015 * canvas)
        base = 0.40 + 0.08 * _smooth_field(rng, canvas, 0.04 * canvas)
        contrast = rng.uniform(*contrast_range)
        speckle = 1.0 + speckle_strength * _smooth_field(rng, canvas, 1.0)
        image = np.clip((base + contrast * halo) * speckle, 0.0, 1.0).astype(np.float32)
        if shadow_prob > 0.0 and shadow_rng.random() < shadow_prob:
            for _ in range(int(shadow_rng.integers(1, 3))):
                theta = shadow_rng.uniform(0.0, np.pi)
                px, py = shadow_rng.uniform(0.25 * canvas, 0.75 * canvas, size=2)
                half_width = shadow_rng.uniform(0.05, 0.11) * canvas
                depth = shadow_rng.uniform(*shadow_strength)
                dist = np.abs(np.cos(theta) * (xx - px) + np.sin(theta) * (yy - py))
                band = np.clip(1.0 - (dist / half_width) ** 2, 0.0, 1.0)
                image = (image * (1.0 - depth * band)).astype(np.float32)
        records.append(ImageRecord(f"synth_{index:04d}", image, mask, "synthetic"))
    return records


def save_dataset(records: Sequence[ImageRecord], out_dir: str | Path, meta: dict | None = None) -> Path:
    """Write records in the paired ``images/`` + ``masks/`` layout plus a manifest."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for record in records:
        if record.mask is None:
            raise ValueError(f"record {record.id!r} has no mask; cannot save")
        image_u8 = np.clip(np.rint(record.image * 255.0), 0, 255).astype(np.uint8)
        cv2.imwrite(str(image_dir / f"{record.id}.png"), image_u8)
        cv2.imwrite(str(mask_dir / f"{record.id}.png"), record.mask * 255)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "count": len(records),
        "ids": [r.id for r in records],
        "source": records[0].source if records else None,
    }
    if meta:
        manifest.update(meta)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _as_fraction(fraction: Fraction | str | float) -> Fraction:
    frac = Fraction(fraction) if not isinstance(fraction, Fraction) else fraction
    if frac not in ALLOWED_FRACTIONS:
        allowed = ", ".join(str(f) for f in ALLOWED_FRACTIONS)
        raise ValueError(f"labeled fraction must be one of {allowed}, got {frac}")
    return frac


def make_partition(
    records: Sequence[ImageRecord],
    fraction: Fraction | str | float,
    val_count: int,
    test_count: int,
    seed: int,
) -> DatasetSplit:
    """Shuffle ids with ``seed`` and carve off test, val, then the labeled pool.

    The labeled count is floor(fraction * training-pool size).  Identical
    inputs always yield the identical split.
    """
    frac = _as_fraction(fraction)
    ids = sorted(r.id for r in records)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    if val_count < 0 or test_count < 0:
        raise ValueError("val_count and test_count must be non-negative")
    if val_count + test_count >= len(ids):
        raise ValueError(
            f"val_count + test_count = {val_count + test_count} leaves no training pool of {len(ids)} records"
        )
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    test_ids = tuple(order[:test_count])
    val_ids = tuple(order[test_count:test_count + val_count])
    pool = order[test_count + val_count:]
    labeled_count = math.floor(frac * len(pool))
    if labeled_count < 1:
        raise ValueError(f"fraction {frac} of pool size {len(pool)} gives an empty labeled set")
    return DatasetSplit(
        labeled_ids=tuple(pool[:labeled_count]),
        unlabeled_ids=tuple(pool[labeled_count:]),
        val_ids=val_ids,
        test_ids=test_ids,
        fraction=frac,
        seed=seed,
    )


def partition_from_id_lists(
    records: Sequence[ImageRecord],
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    test_ids: Sequence[str],
    fraction: Fraction | str | float,
    seed: int,
) -> DatasetSplit:
    """Partition with fixed published train/val/test membership.

    Only the labeled/unlabeled cut inside the training pool is randomized,
    so results remain comparable across tools that share the same lists.
    """
    frac = _as_fraction(fraction)
    known = {r.id for r in records}
    for group_name, group in (("train", train_ids), ("val", val_ids), ("test", test_ids)):
        missing = [rid for rid in group if rid not in known]
        if missing:
            raise ValueError(f"{group_name} id list names unknown records, e.g. {missing[0]!r}")
    rng = np.random.default_rng(seed)
    pool = [train_ids[i] for i in rng.permutation(len(train_ids))]
    labeled_count = math.floor(frac * len(pool))
    if labeled_count < 1:
        raise ValueError(f"fraction {frac} of pool size {len(pool)} gives an empty labeled set")
    return DatasetSplit(
        labeled_ids=tuple(pool[:labeled_count]),
        unlabeled_ids=tuple(pool[labeled_count:]),
        val_ids=tuple(val_ids),
        test_ids=tuple(test_ids),
        fraction=frac,
        seed=seed,
    )


def augment(record: ImageRecord, params: AugmentationParams, rng: np.random.Generator) -> ImageRecord:
    """Resize, randomly rotate and scale about the center, then randomly crop.

    The mask (if any) undergoes the identical geometry with nearest-neighbor
    sampling, so it stays binary.  With rotation 0, scale range (1, 1) and
    crop_to == resize_to the output is exactly the deterministic resize.
    """
    size = params.resize_to
    image = cv2.resize(record.image, (size, size), interpolation=cv2.INTER_LINEAR)
    mask = None
    if record.mask is not None:
        mask = cv2.resize(record.mask, (size, size), interpolation=cv2.INTER_NEAREST)

    # Draw in a fixed order so rng consumption never depends on parameter values.
    angle = float(rng.uniform(-params.rotation, params.rotation))
    scale = float(rng.uniform(params.scale_range[0], params.scale_range[1]))
    max_offset = size - params.crop_to
    offsets = rng.integers(0, max_offset + 1, size=2)

    if angle != 0.0 or scale != 1.0:
        center = ((size - 1) / 2.0, (size - 1) / 2.0)
        matrix = cv2.getRotationMatrix2D(center, angle, scale)
        image = cv2.warpAffine(
            image, matrix, (size, size), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101
        )
        if mask is not None:
            mask = cv2.warpAffine(
                mask, matrix, (size, size), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_REFLECT_101
            )

    y0, x0 = int(offsets[0]), int(offsets[1])
    crop = params.crop_to
    image = image[y0:y0 + crop, x0:x0 + crop]
    if mask is not None:
        mask = mask[y0:y0 + crop, x0:x0 + crop]
    return replace(record, image=np.ascontiguousarray(image), mask=None if mask is None else np.ascontiguousarray(mask))


def resize_mask_64(mask: np.ndarray) -> np.ndarray:
    """Down-project a binary mask to a 64x64 soft grid in [0, 1] by area averaging."""
    if mask.ndim != 2:
        raise ValueError(f"mask must be HxW, got shape {mask.shape}")
    out = cv2.resize(mask.astype(np.float32), (64, 64), interpolation=cv2.INTER_AREA)
    return np.clip(out, 0.0, 1.0)


def augment_mask_set(
    masks: np.ndarray,
    factor: int,
    seed: int,
    rotation: float = 30.0,
    scale_range: tuple[float, float] = (0.8, 1.25),
) -> np.ndarray:
    """Enlarge a mask pool by rotated/scaled/mirrored binary variants.

    Small labeled pools are too thin to train the shape prior on directly;
    geometric variants of the same masks widen the pool without leaking any
    unlabeled information.  The originals come first, output values stay
    binary, and identical arguments give identical output.
    """
    if masks.ndim != 3:
        raise ValueError(f"masks must be NxHxW, got shape {masks.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    rng = np.random.default_rng(seed)
    size = masks.shape[1]
    center = (size / 2 - 0.5, size / 2 - 0.5)
    out = [masks.astype(np.float32)]
    for _ in range(factor - 1):
        batch = []
        for mask in masks:
            angle = rng.uniform(-rotation, rotation)
            scale = rng.uniform(*scale_range)
            mirror = rng.random() < 0.5
            matrix = cv2.getRotationMatrix2D(center, angle, scale)
            warped = cv2.warpAffine(
                mask.astype(np.float32), matrix, (size, size),
                flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0.0,
            )
            warped = (warped >= 0.5).astype(np.float32)
            if mirror:
                warped = warped[:, ::-1].copy()
            batch.append(warped)
        out.append(np.stack(batch))
    return np.concatenate(out)


class PoolCycler:
    """Endless batch iterator over a fixed id pool, reshuffled on exhaustion."""

    def __init__(self, ids: Sequence[str], batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not ids:
            raise ValueError("cannot cycle an empty pool")
        self._ids = list(ids)
        self._batch_size = batch_size
        self._rng = rng
        self._order: list[int] = []
        self._pos = 0

    def next_batch(self) -> list[str]:
        batch: list[str] = []
        while len(batch) < self._batch_size:
            if self._pos >= len(self._order):
                self._order = [int(i) for i in self._rng.permutation(len(self._ids))]
                self._pos = 0
            batch.append(self._ids[self._order[self._pos]])
            self._pos += 1
        return batch

    def state(self) -> dict:
        return {
            "order": list(self._order),
            "pos": self._pos,
            "rng_state": self._rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self._order = [int(i) for i in state["order"]]
        self._pos = int(state["pos"])
        self._rng.bit_generator.state = state["rng_state"]


def sample_batches(
    split: DatasetSplit,
    labeled_batch: int,
    unlabeled_batch: int,
    rng: np.random.Generator,
) -> Iterator[tuple[list[str], list[str]]]:
    """Yield (labeled ids, unlabeled ids) forever; pools cycle independently.

    The smaller pool simply recycles more often, so every batch is full-size.
    An empty unlabeled pool yields empty unlabeled halves.
    """
    labeled_rng, unlabeled_rng = rng.spawn(2)
    labeled = PoolCycler(split.labeled_ids, labeled_batch, labeled_rng)
    unlabeled = None
    if split.unlabeled_ids and unlabeled_batch > 0:
        unlabeled = PoolCycler(split.unlabeled_ids, unlabeled_batch, unlabeled_rng)
    while True:
        yield labeled.next_batch(), unlabeled.next_batch() if unlabeled else []
