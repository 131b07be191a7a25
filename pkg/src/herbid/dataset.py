"""Dataset curation: ingest labeled herb images, standardize them to the
network input, split train/validation/test, and serve per-class herb info.

Directory layout for ingest is one subdirectory per class, named with the
herb's scientific name, containing PNG/JPEG files. The manifest persists as
JSON-lines (header line with the class list, then one record per line).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageOps, UnidentifiedImageError

from .kernels import resize_bilinear
from .seeding import derive_stream, make_generator

log = logging.getLogger(__name__)

STANDARD_SIZE = 256
MAX_ASPECT_RATIO = 4.0
SPLITS = ("train", "validation", "test")
IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


class DatasetError(Exception):
    """Fatal dataset-level problem (missing root, bad ratios, short class)."""


@dataclass
class ImageRecord:
    id: str
    source_path: str
    class_label: str
    width: int
    height: int
    split: str = "unassigned"


@dataclass
class DatasetManifest:
    classes: list[str]
    records: list[ImageRecord]
    counts: dict[str, int] | None = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = self.compute_counts()

    def compute_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for r in self.records:
            if r.class_label in counts:
                counts[r.class_label] += 1
        return counts

    def records_for_split(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]


@dataclass
class SplitSpec:
    ratios: tuple[float, float, float] = (0.75, 0.125, 0.125)
    seed: int = 0

    def validate(self) -> None:
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise DatasetError(f"ratios must be three non-negative fractions, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DatasetError(f"ratios must sum to 1, got {self.ratios} (sum {sum(self.ratios)})")


@dataclass
class RejectEntry:
    path: str
    reason: str


@dataclass
class IngestResult:
    manifest: DatasetManifest
    rejects: list[RejectEntry]
    warnings: list[str]


def ingest_directory(root: str | os.PathLike) -> IngestResult:
    """Scan a label-per-subdirectory tree into a manifest.

    Undecodable files and extreme aspect ratios (> 4:1) become reject
    entries instead of silently disappearing; empty classes are kept in the
    class list and reported as warnings.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist or is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"dataset root {root} contains no class subdirectories")

    records: list[ImageRecord] = []
    rejects: list[RejectEntry] = []
    warnings: list[str] = []
    for class_dir in class_dirs:
        label = class_dir.name
        n_before = len(records)
        for path in sorted(class_dir.iterdir()):
            if not path.is_file():
                continue
            if path.suffix.lower() not in IMAGE_EXTENSIONS:
                warnings.append(f"skipped non-image file {path}")
                continue
            try:
                with Image.open(path) as im:
                    im = ImageOps.exif_transpose(im)
                    im.load()
                    width, height = im.size
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                rejects.append(RejectEntry(str(path), f"decode failed: {exc}"))
                continue
            if max(width, height) > MAX_ASPECT_RATIO * min(width, height):
                rejects.append(
                    RejectEntry(str(path), f"aspect_ratio {width}x{height} exceeds {MAX_ASPECT_RATIO:g}:1")
                )
                continue
            rec_id = path.relative_to(root).as_posix()
            records.append(ImageRecord(rec_id, str(path), label, width, height))
        if len(records) == n_before:
            warnings.append(f"class {label!r} has no usable images")
    for w in warnings:
        log.warning("%s", w)
    manifest = DatasetManifest(classes=[d.name for d in class_dirs], records=records)
    return IngestResult(manifest, rejects, warnings)


def standardize(raw: np.ndarray) -> np.ndarray:
    """Turn a decoded HxWx3 RGB8 array into the 3x256x256 [0,1] network input.

    Resampling is corner-aligned bilinear, so a 256x256 input passes through
    with values exactly pixel/255.
    """
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        channels = raw.shape[2] if raw.ndim == 3 else raw.ndim
        raise DatasetError(f"expected an RGB image with 3 channels, got {channels} (shape {raw.shape})")
    if raw.shape[0] < 1 or raw.shape[1] < 1:
        raise DatasetError(f"image has degenerate size {raw.shape[:2]}")
    chw = np.ascontiguousarray(raw.transpose(2, 0, 1)).astype(np.float32)
    resized = resize_bilinear(chw, STANDARD_SIZE, STANDARD_SIZE)
    return resized / np.float32(255.0)


def load_standardized(path: str | os.PathLike) -> np.ndarray:
    """Decode an image file (EXIF orientation applied) and standardize it."""
    with Image.open(path) as im:
        im = ImageOps.exif_transpose(im)
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    return standardize(arr)


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode in-memory PNG/JPEG bytes to an RGB8 array."""
    import io

    with Image.open(io.BytesIO(data)) as im:
        im = ImageOps.exif_transpose(im)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    # cumulative-boundary rounding keeps counts monotone and non-negative:
    # validation gets round(n*r_v), validation+test gets round(n*(r_v+r_t)),
    # the remainder goes to train
    r_train, r_val, r_test = ratios
    n_val = round(n * r_val)
    n_val_test = round(n * (r_val + r_test))
    return n - n_val_test, n_val, n_val_test - n_val


def stratified_split(manifest: DatasetManifest, spec: SplitSpec) -> DatasetManifest:
    """Assign every record to train/validation/test, stratified per class.

    Per class, records are shuffled by a PCG64 generator seeded from
    (spec.seed, class_label) and partitioned so each class keeps the global
    ratios. Identical (manifest, spec) always produces identical splits.
    """
    spec.validate()
    min_required = sum(1 for r in spec.ratios if r > 0)
    by_class: dict[str, list[int]] = {c: [] for c in manifest.classes}
    for idx, rec in enumerate(manifest.records):
        if rec.class_label not in by_class:
            raise DatasetError(f"record {rec.id!r} has unknown label {rec.class_label!r}")
        by_class[rec.class_label].append(idx)

    new_records = [replace(r) for r in manifest.records]
    for label in manifest.classes:
        indices = by_class[label]
        if len(indices) < min_required:
            raise DatasetError(
                f"class {label!r} has {len(indices)} records, fewer than the "
                f"{min_required} required by ratios {spec.ratios}"
            )
        gen = make_generator(spec.seed, derive_stream("split", label))
        order = gen.permutation(len(indices))
        _, n_val, n_test = _split_sizes(len(indices), spec.ratios)
        for pos, j in enumerate(order):
            if pos < n_val:
                split = "validation"
            elif pos < n_val + n_test:
                split = "test"
            else:
                split = "train"
            new_records[indices[j]].split = split
    return DatasetManifest(classes=list(manifest.classes), records=new_records)


@dataclass
class HerbInfo:
    scientific_name: str
    common_names: list[str] = field(default_factory=list)
    description: str = ""
    medicinal_uses: str = ""
    regions: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scientific_name": self.scientific_name,
            "common_names": list(self.common_names),
            "description": self.description,
            "medicinal_uses": self.medicinal_uses,
            "regions": list(self.regions),
        }


class HerbInfoStore:
    """Immutable-after-load store of per-class herb metadata."""

    def __init__(self, entries: list[HerbInfo]):
        self._by_name: dict[str, HerbInfo] = {}
        for e in entries:
            if not e.scientific_name:
                raise DatasetError("herb info entry with empty scientific_name")
            if e.scientific_name in self._by_name:
                raise DatasetError(f"duplicate herb info entry for {e.scientific_name!r}")
            self._by_name[e.scientific_name] = e

    def lookup(self, scientific_name: str) -> HerbInfo | None:
        return self._by_name.get(scientific_name)

    def __contains__(self, scientific_name: str) -> bool:
        return scientific_name in self._by_name

    def __len__(self) -> int:
        return len(self._by_name)

    def all(self) -> list[HerbInfo]:
        return list(self._by_name.values())


def load_herb_info(path: str | os.PathLike) -> HerbInfoStore:
    """Load the herb-info JSON document (array of records)."""
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise DatasetError(f"herb info file {path} must contain a JSON array")
    entries = []
    for item in data:
        entries.append(
            HerbInfo(
                scientific_name=item.get("scientific_name", ""),
                common_names=list(item.get("common_names", [])),
                description=item.get("description", ""),
                medicinal_uses=item.get("medicinal_uses", ""),
                regions=list(item.get("regions", [])),
            )
        )
    return HerbInfoStore(entries)


@dataclass
class Violation:
    kind: str
    message: str


def validate_manifest(manifest: DatasetManifest) -> list[Violation]:
    """Report every invariant violation; an empty report means a well-formed manifest."""
    violations: list[Violation] = []
    seen_classes = set()
    for c in manifest.classes:
        if c in seen_classes:
            violations.append(Violation("duplicate_class", f"class {c!r} declared twice"))
        seen_classes.add(c)

    by_id: dict[str, list[ImageRecord]] = {}
    for rec in manifest.records:
        by_id.setdefault(rec.id, []).append(rec)
        if rec.class_label not in seen_classes:
            violations.append(
                Violation("unknown_label", f"record {rec.id!r} has label {rec.class_label!r} outside the class list")
            )
        if rec.width < 1 or rec.height < 1:
            violations.append(Violation("bad_dimensions", f"record {rec.id!r} has size {rec.width}x{rec.height}"))
        if rec.split not in SPLITS and rec.split != "unassigned":
            violations.append(Violation("invalid_split", f"record {rec.id!r} has unknown split {rec.split!r}"))
    for rec_id, recs in by_id.items():
        if len(recs) > 1:
            splits = {r.split for r in recs}
            if len(splits) > 1:
                violations.append(
                    Violation("split_exclusivity", f"record {rec_id!r} appears in splits {sorted(splits)}")
                )
            else:
                violations.append(Violation("duplicate_id", f"record id {rec_id!r} appears {len(recs)} times"))

    actual = manifest.compute_counts()
    for label, count in (manifest.counts or {}).items():
        if actual.get(label, 0) != count:
            violations.append(
                Violation("count_mismatch", f"class {label!r} declares {count} records but has {actual.get(label, 0)}")
            )
    return violations


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"version": 1, "classes": manifest.classes}) + "\n")
        for r in manifest.records:
            f.write(
                json.dumps(
                    {
                        "id": r.id,
                        "path": r.source_path,
                        "label": r.class_label,
                        "width": r.width,
                        "height": r.height,
                        "split": r.split,
                    }
                )
                + "\n"
            )


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    with open(path, encoding="utf-8") as f:
        header_line = f.readline()
        if not header_line.strip():
            raise DatasetError(f"manifest {path} is empty")
        header = json.loads(header_line)
        if header.get("version") != 1 or "classes" not in header:
            raise DatasetError(f"manifest {path} has an unsupported header: {header_line.strip()}")
        records = []
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(
                ImageRecord(
                    id=d["id"],
                    source_path=d["path"],
                    class_label=d["label"],
                    width=d["width"],
                    height=d["height"],
                    split=d.get("split", "unassigned"),
                )
            )
    return DatasetManifest(classes=list(header["classes"]), records=records)


def save_rejects(rejects: list[RejectEntry], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rejects:
            f.write(json.dumps({"path": r.path, "reason": r.reason}) + "\n")
