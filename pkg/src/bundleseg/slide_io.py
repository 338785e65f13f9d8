"""Section image, mask, outline, and dataset-manifest I/O.

All loaders are pure and reentrant; they share no mutable state and are safe
to call concurrently on distinct files.

File formats:
    - section images: single-channel grayscale PNG or TIFF (8-bit, 16-bit, or
      32-bit float TIFF)
    - label masks / outline masks: 8-bit indexed PNG (plain grayscale PNG is
      accepted on read)
    - manifest: one JSON file, schema documented in the README; paths inside
      the manifest are resolved relative to the manifest's directory
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, ShapeMismatchError, ValidationError

CLASS_BACKGROUND = 0
CLASS_DENSE = 1
CLASS_MODERATE = 2
CLASS_SPARSE = 3
FOREGROUND_CLASSES = (CLASS_DENSE, CLASS_MODERATE, CLASS_SPARSE)
CLASS_NAMES = {CLASS_DENSE: "dense", CLASS_MODERATE: "moderate", CLASS_SPARSE: "sparse"}

VALID_SPLITS = ("train", "test", "unlabeled")
MAX_FOLD = 4

# mask PNG palette: background, dense, moderate, sparse (the figure colors)
_MASK_PALETTE = [0, 0, 0, 0, 200, 0, 0, 200, 200, 220, 0, 0]
_OUTLINE_PALETTE = [0, 0, 0, 255, 255, 255]


@dataclass
class SectionImage:
    """One downsampled grayscale histological section."""

    section_id: str
    brain_id: str
    pixels: np.ndarray
    section_index: int = 0
    pixel_size_um: float = 1.6
    downsample_factor: int = 1

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValidationError(
                f"section {self.section_id!r}: pixels must be a 2D array, got shape {self.pixels.shape}"
            )
        if not self.pixel_size_um > 0:
            raise ValidationError(f"section {self.section_id!r}: pixel_size_um must be > 0")
        if self.downsample_factor < 1:
            raise ValidationError(f"section {self.section_id!r}: downsample_factor must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass
class LabelMask:
    """Per-pixel bundle-class codes: 0=background, 1=dense, 2=moderate, 3=sparse."""

    section_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValidationError(f"label mask {self.section_id!r}: expected 2D array")
        bad = np.setdiff1d(np.unique(self.labels), [0, 1, 2, 3])
        if bad.size:
            raise ValidationError(
                f"label mask {self.section_id!r}: illegal class codes {bad.tolist()}"
            )


@dataclass
class OutlineMask:
    """Valid-annotation region; True = inside the annotated hemisphere outline."""

    section_id: str
    inside: np.ndarray

    def __post_init__(self):
        self.inside = np.asarray(self.inside).astype(bool)
        if self.inside.ndim != 2:
            raise ValidationError(f"outline mask {self.section_id!r}: expected 2D array")


@dataclass
class ManifestEntry:
    section_id: str
    brain_id: str
    image_path: Path
    split: str
    label_path: Path | None = None
    outline_path: Path | None = None
    fold: int | None = None
    section_index: int = 0


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    pixel_size_um: float = 1.6
    downsample_factor: int = 1

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def get(self, section_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.section_id == section_id:
                return e
        raise ManifestError(f"no manifest entry for section {section_id!r}")


def _entry_from_dict(raw: dict, base: Path, index: int) -> ManifestEntry:
    if not isinstance(raw, dict):
        raise ManifestError(f"entry #{index}: expected an object, got {type(raw).__name__}")
    missing = [k for k in ("section_id", "brain_id", "image_path", "split") if k not in raw]
    if missing:
        raise ManifestError(f"entry #{index}: missing required fields {missing}")
    sid = raw["section_id"]
    known = {
        "section_id", "brain_id", "image_path", "label_path", "outline_path",
        "split", "fold", "section_index",
    }
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ManifestError(f"entry {sid!r}: unknown fields {unknown}")

    split = raw["split"]
    if split not in VALID_SPLITS:
        raise ManifestError(f"entry {sid!r}: split must be one of {VALID_SPLITS}, got {split!r}")
    if split == "train" and not raw.get("label_path"):
        raise ManifestError(f"entry {sid!r}: train entries must have a label_path")
    if split == "unlabeled" and raw.get("label_path"):
        raise ManifestError(f"entry {sid!r}: unlabeled entries must not have a label_path")

    fold = raw.get("fold")
    if fold is not None:
        if split != "train":
            raise ManifestError(f"entry {sid!r}: fold may only be assigned to train entries")
        if not isinstance(fold, int) or not 0 <= fold <= MAX_FOLD:
            raise ManifestError(f"entry {sid!r}: fold must be an integer in [0, {MAX_FOLD}]")

    def _resolve(key):
        p = raw.get(key)
        return (base / p) if p else None

    return ManifestEntry(
        section_id=sid,
        brain_id=raw["brain_id"],
        image_path=base / raw["image_path"],
        split=split,
        label_path=_resolve("label_path"),
        outline_path=_resolve("outline_path"),
        fold=fold,
        section_index=int(raw.get("section_index", index)),
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a dataset manifest JSON file.

    Relative paths inside the file are resolved against the manifest's own
    directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict) or "entries" not in raw:
        raise ManifestError(f"manifest {path}: expected an object with an 'entries' list")

    base = path.parent
    entries = [_entry_from_dict(r, base, i) for i, r in enumerate(raw["entries"])]

    seen: dict[str, int] = {}
    for e in entries:
        if e.section_id in seen:
            raise ManifestError(f"duplicate section_id {e.section_id!r} in manifest")
        seen[e.section_id] = 1

    manifest = DatasetManifest(
        entries=entries,
        pixel_size_um=float(raw.get("pixel_size_um", 1.6)),
        downsample_factor=int(raw.get("downsample_factor", 1)),
    )
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest JSON with paths stored relative to its directory."""
    path = Path(path)
    base = path.parent

    def _rel(p: Path | None):
        if p is None:
            return None
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    entries = []
    for e in manifest.entries:
        d = {
            "section_id": e.section_id,
            "brain_id": e.brain_id,
            "image_path": _rel(e.image_path),
            "split": e.split,
            "section_index": e.section_index,
        }
        if e.label_path is not None:
            d["label_path"] = _rel(e.label_path)
        if e.outline_path is not None:
            d["outline_path"] = _rel(e.outline_path)
        if e.fold is not None:
            d["fold"] = e.fold
        entries.append(d)
    doc = {
        "pixel_size_um": manifest.pixel_size_um,
        "downsample_factor": manifest.downsample_factor,
        "entries": entries,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_gray(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise ValidationError(f"cannot read image {path}: {e}") from e
    if img.mode in ("L", "P"):
        arr = np.asarray(img.convert("L") if img.mode == "P" else img, dtype=np.uint8)
    elif img.mode in ("I", "I;16"):
        arr = np.asarray(img, dtype=np.int32)
        if arr.min() < 0 or arr.max() > 0xFFFF:
            raise ValidationError(f"{path}: integer image out of 16-bit range")
        arr = arr.astype(np.uint16)
    elif img.mode == "F":
        arr = np.asarray(img, dtype=np.float32)
        if (arr < 0).any():
            raise ValidationError(f"{path}: float image has negative intensities")
    else:
        raise ValidationError(f"{path}: unsupported image mode {img.mode!r}, expected grayscale")
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected single-channel image, got shape {arr.shape}")
    return arr


def _read_index(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise ValidationError(f"cannot read mask {path}: {e}") from e
    if img.mode not in ("P", "L", "1"):
        raise ValidationError(f"{path}: masks must be 8-bit indexed or grayscale PNG, got mode {img.mode!r}")
    if img.mode == "1":
        img = img.convert("L")
        return (np.asarray(img, dtype=np.uint8) > 0).astype(np.uint8)
    return np.asarray(img, dtype=np.uint8)


def load_section(
    entry: ManifestEntry,
    *,
    load_labels: bool = True,
    pixel_size_um: float = 1.6,
    downsample_factor: int = 1,
) -> tuple[SectionImage, LabelMask | None, OutlineMask | None]:
    """Load the image (and, when present, label and outline masks) of one entry.

    With ``load_labels=False`` only the image file is touched; label and
    outline paths are never read (used by reconstruction pre-training).
    """
    pixels = _read_gray(entry.image_path)
    section = SectionImage(
        section_id=entry.section_id,
        brain_id=entry.brain_id,
        pixels=pixels,
        section_index=entry.section_index,
        pixel_size_um=pixel_size_um,
        downsample_factor=downsample_factor,
    )
    if not load_labels:
        return section, None, None

    labels = None
    if entry.label_path is not None:
        codes = _read_index(entry.label_path)
        if codes.shape != pixels.shape:
            raise ShapeMismatchError(
                f"section {entry.section_id!r}: label mask shape {codes.shape} "
                f"!= image shape {pixels.shape}"
            )
        labels = LabelMask(section_id=entry.section_id, labels=codes)

    outline = None
    if entry.outline_path is not None:
        inside = _read_index(entry.outline_path)
        if inside.shape != pixels.shape:
            raise ShapeMismatchError(
                f"section {entry.section_id!r}: outline shape {inside.shape} "
                f"!= image shape {pixels.shape}"
            )
        outline = OutlineMask(section_id=entry.section_id, inside=inside > 0)
    return section, labels, outline


def downsample(image: np.ndarray, factor: int, reduce: str = "mean") -> np.ndarray:
    """Downsample a 2D array by an integer factor.

    ``reduce="mean"`` averages each factor x factor block (intensity images);
    ``reduce="max"`` takes the block maximum (label masks, so thin annotations
    survive). Trailing rows/columns that do not fill a block are dropped.
    """
    image = np.asarray(image)
    if factor < 1:
        raise ValidationError(f"downsample factor must be >= 1, got {factor}")
    if image.ndim != 2:
        raise ValidationError(f"downsample expects a 2D array, got shape {image.shape}")
    if min(image.shape) < factor:
        raise ValidationError(
            f"image shape {image.shape} smaller than downsample factor {factor}"
        )
    if factor == 1:
        return image.copy()
    h, w = image.shape
    h2, w2 = h // factor, w // factor
    blocks = image[: h2 * factor, : w2 * factor].reshape(h2, factor, w2, factor)
    if reduce == "mean":
        return blocks.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    if reduce == "max":
        return blocks.max(axis=(1, 3))
    raise ValidationError(f"unknown reduce mode {reduce!r}, expected 'mean' or 'max'")


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    """Write a grayscale image; dtype picks the encoding.

    uint8/uint16 go to PNG or TIFF by suffix; float32 requires a .tif/.tiff
    suffix (32-bit float TIFF).
    """
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.dtype == np.uint8:
        img = Image.fromarray(pixels, mode="L")
    elif pixels.dtype == np.uint16:
        img = Image.fromarray(pixels)
    elif pixels.dtype in (np.float32, np.float64):
        if path.suffix.lower() not in (".tif", ".tiff"):
            raise ValidationError("float images must be saved as 32-bit TIFF (.tif)")
        img = Image.fromarray(pixels.astype(np.float32), mode="F")
    else:
        raise ValidationError(f"unsupported image dtype {pixels.dtype}")
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def save_mask(path: str | Path, codes: np.ndarray) -> None:
    """Write a label mask as an 8-bit indexed PNG with the class palette."""
    path = Path(path)
    codes = np.asarray(codes).astype(np.uint8)
    img = Image.fromarray(codes, mode="P")
    img.putpalette(_MASK_PALETTE + [0] * (768 - len(_MASK_PALETTE)))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def save_outline(path: str | Path, inside: np.ndarray) -> None:
    """Write an outline mask (0 = outside, 1 = inside) as an indexed PNG."""
    path = Path(path)
    img = Image.fromarray(np.asarray(inside).astype(np.uint8), mode="P")
    img.putpalette(_OUTLINE_PALETTE + [0] * (768 - len(_OUTLINE_PALETTE)))
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def manifest_summary(manifest: DatasetManifest) -> str:
    """Human-readable per-brain/split/fold section counts for `ingest`."""
    lines = []
    brains = sorted({e.brain_id for e in manifest.entries})
    header = f"{'brain':<10} {'split':<10} {'fold':<6} {'sections':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    total = 0
    for brain in brains:
        for split in VALID_SPLITS:
            entries = [e for e in manifest.entries if e.brain_id == brain and e.split == split]
            if not entries:
                continue
            folds = sorted({e.fold for e in entries}, key=lambda f: (f is None, f))
            for f in folds:
                n = sum(1 for e in entries if e.fold == f)
                total += n
                fold_str = "-" if f is None else str(f)
                lines.append(f"{brain:<10} {split:<10} {fold_str:<6} {n:>8}")
    lines.append("-" * len(header))
    lines.append(f"{'total':<28} {total:>8}")
    return "\n".join(lines)
