"""Dataset ingestion, deterministic splits, and the procedural synthetic corpus.

Real data comes in as a directory of pre-aligned PNG/JPEG images plus a CSV
metadata file with header ``filename,age,subject_id``. The synthetic corpus
renders a fixed-identity canvas per subject (smooth background plus an
identity blob) and overwrites a fixed "aging region" with a group-dependent
patch: a brightness ramp plus one dark stroke per group step. Same subject,
different groups therefore differ only inside the region, which is what the
attention-locality metric later measures against.
"""
from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from PIL import Image

from .conditioning import AgeGroupScheme, bin_age, onehot_batch
from .errors import InvariantError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}

# Open-ended last group needs an upper bound for synthetic age draws.
SYNTH_LAST_GROUP_SPAN = 20


@dataclass(frozen=True)
class DatasetRecord:
    image: torch.Tensor  # (3,H,W) float32 in [-1,1]
    age: int
    subject_id: str
    path: str | None = None


@dataclass(frozen=True)
class IngestError:
    filename: str
    reason: str


class IngestResult(NamedTuple):
    records: list[DatasetRecord]
    errors: list[IngestError]


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.9
    seed: int = 0
    by_subject: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise InvariantError(f"train_fraction must be in (0,1), got {self.train_fraction}")


class TensorBundle(NamedTuple):
    images: torch.Tensor         # (N,3,H,W)
    onehots: torch.Tensor        # (N,5)
    group_indices: torch.Tensor  # (N,) long
    ages: torch.Tensor           # (N,) long
    subject_ids: list[str]


def image_to_tensor(img: Image.Image, resolution: tuple[int, int]) -> torch.Tensor:
    """Resizes and maps 8-bit pixels affinely onto [-1,1] (0 -> -1, 255 -> 1)."""
    h, w = resolution
    img = img.convert("RGB")
    if img.size != (w, h):
        img = img.resize((w, h), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def tensor_to_image(tensor: torch.Tensor) -> Image.Image:
    """Inverse of image_to_tensor up to 8-bit quantization."""
    arr = tensor.detach().clamp(-1.0, 1.0).permute(1, 2, 0).numpy()
    return Image.fromarray(np.round((arr + 1.0) * 127.5).astype(np.uint8))


def ingest_directory(root: str | Path, metadata_file: str | Path,
                     resolution: tuple[int, int],
                     scheme: AgeGroupScheme | None = None) -> IngestResult:
    """Loads every decodable image under root that has a valid metadata row.

    Per-file failures (missing row, undecodable image, bad age or subject)
    are collected instead of aborting; a summary is logged.
    """
    scheme = scheme or AgeGroupScheme()
    root = Path(root)
    rows: dict[str, dict] = {}
    with open(metadata_file, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"filename", "age", "subject_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise InvariantError(
                f"metadata file must have header filename,age,subject_id, got {reader.fieldnames}"
            )
        for row in reader:
            rows[row["filename"]] = row

    records: list[DatasetRecord] = []
    errors: list[IngestError] = []
    files = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    for path in files:
        row = rows.get(path.name)
        if row is None:
            errors.append(IngestError(path.name, "no metadata row"))
            continue
        try:
            age = int(row["age"])
        except (TypeError, ValueError):
            errors.append(IngestError(path.name, f"invalid age {row['age']!r}"))
            continue
        subject_id = (row["subject_id"] or "").strip()
        if not subject_id:
            errors.append(IngestError(path.name, "empty subject_id"))
            continue
        if age < scheme.lower_bounds[0]:
            errors.append(IngestError(path.name, f"age {age} outside scheme {scheme.describe()}"))
            continue
        try:
            with Image.open(path) as img:
                tensor = image_to_tensor(img, resolution)
        except Exception as exc:  # PIL raises various decode errors
            errors.append(IngestError(path.name, f"undecodable image: {exc}"))
            continue
        records.append(DatasetRecord(image=tensor, age=age, subject_id=subject_id,
                                     path=str(path)))
    if errors:
        log.warning("ingest: %d records, %d files skipped", len(records), len(errors))
        for err in errors:
            log.warning("  %s: %s", err.filename, err.reason)
    else:
        log.info("ingest: %d records", len(records))
    return IngestResult(records, errors)


def split(records: Sequence[DatasetRecord], spec: SplitSpec
          ) -> tuple[list[DatasetRecord], list[DatasetRecord]]:
    """Deterministic train/test partition; subject-disjoint when by_subject is set."""
    if not records:
        raise InvariantError("cannot split an empty record list")
    rng = random.Random(spec.seed)
    if not spec.by_subject:
        order = list(range(len(records)))
        rng.shuffle(order)
        n_train = int(len(records) * spec.train_fraction)
        if n_train == 0 or n_train == len(records):
            raise InvariantError(
                f"train_fraction {spec.train_fraction} leaves an empty side for "
                f"{len(records)} records"
            )
        train_idx = set(order[:n_train])
        train = [r for i, r in enumerate(records) if i in train_idx]
        test = [r for i, r in enumerate(records) if i not in train_idx]
        return train, test

    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 2:
        raise InvariantError("by_subject split needs at least 2 subjects")
    rng.shuffle(subjects)
    counts = {s: 0 for s in subjects}
    for r in records:
        counts[r.subject_id] += 1
    target = len(records) * spec.train_fraction
    train_subjects: set[str] = set()
    accumulated = 0
    for s in subjects[:-1]:  # always leave at least one subject for test
        if accumulated >= target:
            break
        train_subjects.add(s)
        accumulated += counts[s]
    if not train_subjects:
        train_subjects.add(subjects[0])
    train = [r for r in records if r.subject_id in train_subjects]
    test = [r for r in records if r.subject_id not in train_subjects]
    return train, test


def aging_region(resolution: tuple[int, int]) -> tuple[int, int, int, int]:
    """Half-open (row0, row1, col0, col1) bounds of the synthetic aging region."""
    h, w = resolution
    return 5 * h // 8, 7 * h // 8, w // 8, 7 * w // 8


def region_mask(resolution: tuple[int, int]) -> torch.Tensor:
    """(H,W) boolean mask of the aging region."""
    h, w = resolution
    r0, r1, c0, c1 = aging_region(resolution)
    mask = torch.zeros(h, w, dtype=torch.bool)
    mask[r0:r1, c0:c1] = True
    return mask


def _subject_canvas(subject_seed: int, resolution: tuple[int, int]) -> np.ndarray:
    """Fixed per-subject base image: textured background plus an identity blob.

    The background mixes smooth sinusoids with per-subject pixel noise. The
    noise matters: it cannot be reproduced through a downsampling generator
    bottleneck, so preserving it forces the attention path rather than a
    full repaint, just like photographic detail would.
    """
    h, w = resolution
    rng = np.random.default_rng(subject_seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    canvas = np.zeros((3, h, w), dtype=np.float32)
    for c in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        px, py = rng.uniform(0.0, 1.0, size=2)
        canvas[c] = 0.3 * np.sin(2 * np.pi * (fx * xx / w + px)) \
            + 0.3 * np.cos(2 * np.pi * (fy * yy / h + py))
    canvas += rng.uniform(-0.35, 0.35, size=(3, h, w)).astype(np.float32)
    # Identity blob sits above the aging region so it never ages.
    r0, _, _, _ = aging_region(resolution)
    radius = max(2, h // 8)
    cy = rng.integers(radius, max(radius + 1, r0 - radius))
    cx = rng.integers(radius, w - radius)
    blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    color = rng.uniform(-1.0, 1.0, size=3).astype(np.float32)
    for c in range(3):
        canvas[c][blob] = color[c]
    return np.clip(canvas, -0.95, 0.95)


def _age_patch(group: int, resolution: tuple[int, int]) -> np.ndarray:
    """Group-dependent content of the aging region: ramp plus group+1 strokes."""
    r0, r1, c0, c1 = aging_region(resolution)
    rh, rw = r1 - r0, c1 - c0
    base = 0.7 - 0.35 * group
    patch = np.empty((3, rh, rw), dtype=np.float32)
    patch[0] = base
    patch[1] = base * 0.85
    patch[2] = base * 0.7
    for k in range(group + 1):
        row = (k + 1) * rh // (group + 2)
        patch[:, row, :] = -0.9
    return patch


def synth_record_image(subject_seed: int, group: int,
                       resolution: tuple[int, int]) -> torch.Tensor:
    canvas = _subject_canvas(subject_seed, resolution)
    r0, r1, c0, c1 = aging_region(resolution)
    canvas[:, r0:r1, c0:c1] = _age_patch(group, resolution)
    return torch.from_numpy(canvas)


def synth_dataset(n: int, resolution: tuple[int, int], seed: int,
                  scheme: AgeGroupScheme | None = None) -> list[DatasetRecord]:
    """Renders n records with round-robin group assignment (record i -> group i%5)."""
    if n < 5:
        raise InvariantError(f"synthetic dataset needs n >= 5, got {n}")
    scheme = scheme or AgeGroupScheme()
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        group = i % 5
        subject_index = i // 5
        subject_seed = seed * 1_000_003 + subject_index
        low, high = scheme.range_of(group)
        if high is None:
            high = low + SYNTH_LAST_GROUP_SPAN - 1
        age = int(rng.integers(low, high + 1))
        records.append(DatasetRecord(
            image=synth_record_image(subject_seed, group, resolution),
            age=age,
            subject_id=f"syn{subject_index:05d}",
        ))
    return records


def save_records(records: Sequence[DatasetRecord], out_dir: str | Path) -> Path:
    """Materializes records as PNGs plus a metadata.csv; returns the csv path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta_path = out_dir / "metadata.csv"
    with open(meta_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "age", "subject_id"])
        for i, rec in enumerate(records):
            filename = f"img{i:06d}.png"
            tensor_to_image(rec.image).save(out_dir / filename)
            writer.writerow([filename, rec.age, rec.subject_id])
    return meta_path


def to_tensors(records: Sequence[DatasetRecord],
               scheme: AgeGroupScheme | None = None) -> TensorBundle:
    """Stacks records into batched tensors with one-hot group labels."""
    scheme = scheme or AgeGroupScheme()
    if not records:
        raise InvariantError("no records to stack")
    images = torch.stack([r.image for r in records])
    groups = torch.tensor([bin_age(r.age, scheme).group_index for r in records],
                          dtype=torch.long)
    ages = torch.tensor([r.age for r in records], dtype=torch.long)
    return TensorBundle(images=images, onehots=onehot_batch(groups),
                        group_indices=groups, ages=ages,
                        subject_ids=[r.subject_id for r in records])
