"""Labeled-dataset ingestion, stratified splitting, and a synthetic generator.

The generator produces fundus-like discs on dark backgrounds. Class 0 has
no lesions; class c >= 1 carries exactly c small high-contrast blobs whose
pixel bounding boxes are recorded, giving the localisation ground truth the
real data lacks. Output is byte-deterministic per seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .imaging import Image, round_half_away

CLASS_NAMES = ("normal", "mild", "moderate", "severe", "proliferative")
_IMAGE_EXTENSIONS = (".png", ".ppm", ".pgm")


@dataclass
class DatasetRecord:
    image_id: str
    path: Path
    label: int
    lesion_boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


@dataclass
class ClassDistribution:
    counts: np.ndarray
    fractions: np.ndarray
    total: int


@dataclass
class SplitResult:
    train: list[DatasetRecord]
    val: list[DatasetRecord]
    test: list[DatasetRecord]
    warnings: list[str] = field(default_factory=list)


def load_labeled_dataset(
    image_dir: str | Path, labels_csv: str | Path, num_classes: int = 5
) -> list[DatasetRecord]:
    """Read `id,label` rows and resolve each id to an image file under image_dir."""
    image_dir = Path(image_dir)
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with open(labels_csv, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "label"]:
            raise DatasetError(f"{labels_csv}: expected header 'id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DatasetError(f"{labels_csv}:{lineno}: expected 2 columns, got {len(row)}")
            image_id, label_text = row[0].strip(), row[1].strip()
            try:
                label = int(label_text)
            except ValueError:
                raise DatasetError(
                    f"{labels_csv}:{lineno}: label {label_text!r} is not an integer"
                ) from None
            if not 0 <= label < num_classes:
                raise DatasetError(
                    f"{labels_csv}:{lineno}: label {label} outside 0..{num_classes - 1}"
                )
            if image_id in seen:
                raise DatasetError(f"{labels_csv}:{lineno}: duplicate id {image_id!r}")
            seen.add(image_id)
            path = _resolve_image(image_dir, image_id)
            if path is None:
                raise DatasetError(
                    f"{labels_csv}:{lineno}: no image for id {image_id!r} under {image_dir}"
                )
            records.append(DatasetRecord(image_id=image_id, path=path, label=label))
    return records


def _resolve_image(image_dir: Path, image_id: str) -> Path | None:
    direct = image_dir / image_id
    if direct.suffix and direct.is_file():
        return direct
    for ext in _IMAGE_EXTENSIONS:
        candidate = image_dir / (image_id + ext)
        if candidate.is_file():
            return candidate
    return None


def class_distribution(records: list[DatasetRecord], num_classes: int = 5) -> ClassDistribution:
    counts = np.zeros(num_classes, dtype=np.int64)
    for rec in records:
        counts[rec.label] += 1
    total = int(counts.sum())
    fractions = counts / total if total else np.zeros(num_classes)
    return ClassDistribution(counts=counts, fractions=fractions, total=total)


def stratified_split(
    records: list[DatasetRecord],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitResult:
    """Per-class seeded shuffle, then largest-remainder allocation to the splits.

    Splits are disjoint, their union is the input, and per-class counts match
    the fractions within one sample. Classes smaller than the number of
    splits produce warnings rather than silent drops.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    by_class: dict[int, list[DatasetRecord]] = {}
    for rec in records:
        by_class.setdefault(rec.label, []).append(rec)

    rng = np.random.Generator(np.random.PCG64(seed))
    splits: tuple[list[DatasetRecord], ...] = ([], [], [])
    warnings: list[str] = []
    for label in sorted(by_class):
        members = by_class[label]
        n = len(members)
        if n < 3:
            warnings.append(f"class {label} has only {n} sample(s) for 3 splits")
        order = rng.permutation(n)
        shuffled = [members[i] for i in order]
        base = [int(np.floor(f * n)) for f in fractions]
        remainders = [f * n - b for f, b in zip(fractions, base)]
        for i in sorted(range(3), key=lambda i: (-remainders[i], i))[: n - sum(base)]:
            base[i] += 1
        start = 0
        for split, size in zip(splits, base):
            split.extend(shuffled[start : start + size])
            start += size
    return SplitResult(train=splits[0], val=splits[1], test=splits[2], warnings=warnings)


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(
    out_dir: str | Path,
    count: int,
    num_classes: int = 5,
    image_size: int = 64,
    seed: int = 0,
) -> list[DatasetRecord]:
    """Generate a class-balanced synthetic dataset with lesion ground truth.

    Writes `<id>.png` per image plus `labels.csv` (id,label) and `boxes.csv`
    (id,label,box_x,box_y,box_w,box_h, one row per lesion box).
    """
    from .image_io import atomic_write_bytes, write_image

    if count < num_classes:
        raise ValueError(f"count {count} smaller than number of classes {num_classes}")
    if image_size < 32:
        raise ValueError(f"image_size must be >= 32, got {image_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    per_class = [count // num_classes + (1 if c < count % num_classes else 0) for c in range(num_classes)]
    labels = [c for c in range(num_classes) for _ in range(per_class[c])]

    records: list[DatasetRecord] = []
    label_lines = ["id,label"]
    box_lines = ["id,label,box_x,box_y,box_w,box_h"]
    for index, label in enumerate(labels):
        image_id = f"synth_{index:05d}"
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
        img, boxes = _render_fundus(rng, image_size, label)
        path = out_dir / f"{image_id}.png"
        write_image(path, img)
        records.append(DatasetRecord(image_id=image_id, path=path, label=label, lesion_boxes=boxes))
        label_lines.append(f"{image_id},{label}")
        for x, y, w, h in boxes:
            box_lines.append(f"{image_id},{label},{x},{y},{w},{h}")
    atomic_write_bytes(out_dir / "labels.csv", ("\n".join(label_lines) + "\n").encode())
    atomic_write_bytes(out_dir / "boxes.csv", ("\n".join(box_lines) + "\n").encode())
    return records


def _render_fundus(
    rng: np.random.Generator, size: int, lesion_count: int
) -> tuple[Image, list[tuple[int, int, int, int]]]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    cx = size / 2.0 + rng.uniform(-size / 32.0, size / 32.0)
    cy = size / 2.0 + rng.uniform(-size / 32.0, size / 32.0)
    disc_r = size * rng.uniform(0.40, 0.45)
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)

    background = np.full((size, size, 3), 14.0)
    tint = rng.uniform(-12.0, 12.0)
    base = np.array([170.0 + tint, 88.0 + tint * 0.5, 42.0])
    shading = 1.0 - 0.30 * np.clip(dist / disc_r, 0.0, 1.2) ** 2
    disc = base[None, None, :] * shading[:, :, None]
    coverage = np.clip(disc_r + 0.5 - dist, 0.0, 1.0)[:, :, None]
    canvas = background * (1.0 - coverage) + disc * coverage

    boxes: list[tuple[int, int, int, int]] = []
    centers: list[tuple[float, float, float]] = []
    for _ in range(lesion_count):
        r = size * rng.uniform(0.050, 0.065)
        bx, by = _place_blob(rng, cx, cy, disc_r, r, centers)
        centers.append((bx, by, r))
        bright = rng.random() < 0.5
        color = np.array([250.0, 236.0, 170.0]) if bright else np.array([38.0, 14.0, 10.0])
        blob_dist = np.sqrt((xx - bx) ** 2 + (yy - by) ** 2)
        cov = np.clip(r + 0.5 - blob_dist, 0.0, 1.0)[:, :, None]
        canvas = canvas * (1.0 - cov) + color[None, None, :] * cov

        x0, y0 = int(np.floor(bx - r)), int(np.floor(by - r))
        x1, y1 = int(np.ceil(bx + r)), int(np.ceil(by + r))
        boxes.append((x0, y0, x1 - x0, y1 - y0))

    canvas = canvas + rng.normal(0.0, 3.5, size=(size, size, 3))
    pixels = np.clip(round_half_away(canvas), 0, 255).astype(np.uint8)
    return Image(pixels), boxes


def _place_blob(
    rng: np.random.Generator,
    cx: float,
    cy: float,
    disc_r: float,
    r: float,
    existing: list[tuple[float, float, float]],
) -> tuple[float, float]:
    """Sample a blob center inside the disc, away from the ones already placed."""
    max_offset = disc_r - (r * 1.5 + 2.5)
    min_gap = 2.0
    while True:
        for _ in range(120):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            radius = max_offset * np.sqrt(rng.uniform(0.0, 1.0))
            bx, by = cx + radius * np.cos(angle), cy + radius * np.sin(angle)
            clear = all(
                np.hypot(bx - ox, by - oy) >= (r + orad) * min_gap for ox, oy, orad in existing
            )
            if clear:
                return bx, by
        min_gap = max(1.1, min_gap * 0.85)  # crowded disc: relax spacing, stay non-merging
