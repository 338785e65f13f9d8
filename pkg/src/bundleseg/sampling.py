"""Stratified patch sampling and augmentation.

A configurable fraction of each section's patches is guaranteed to contain
foreground by centering those patches on randomly chosen positive pixels
(clamped at image borders, never padded). Remaining patches are uniform.
Augmentation is flips plus an elastic deformation driven by a coarse
control-point grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError, ValidationError
from .slide_io import LabelMask, SectionImage

EPS_STD = 1e-8


@dataclass
class SamplerConfig:
    patch_size: int = 1024
    patches_per_section: int = 20
    foreground_fraction: float = 0.5
    included_classes: tuple[int, ...] = (1, 2, 3)
    flip_probability: float = 0.5
    elastic_probability: float = 0.5
    elastic_grid: int = 8
    elastic_max_displacement_px: float = 20.0
    rng_seed: int = 0

    def __post_init__(self):
        self.included_classes = tuple(sorted(set(self.included_classes)))
        if self.patch_size < 16:
            raise ValidationError(f"patch_size must be >= 16, got {self.patch_size}")
        if self.patches_per_section < 1:
            raise ValidationError("patches_per_section must be >= 1")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise ValidationError(
                f"foreground_fraction must be in [0, 1], got {self.foreground_fraction}"
            )
        if not self.included_classes:
            raise ValidationError("included_classes must not be empty")
        if any(c not in (1, 2, 3) for c in self.included_classes):
            raise ValidationError(f"included_classes must be a subset of {{1,2,3}}, got {self.included_classes}")
        if self.elastic_grid < 2:
            raise ValidationError("elastic_grid must be >= 2")


@dataclass
class PatchSample:
    """One normalized training patch with its binary target.

    is_foreground mirrors the target: true iff the target has at least one
    positive pixel (recomputed rather than trusted, so augmentation that
    warps away a sliver of foreground cannot leave the flag stale).
    """

    pixels: np.ndarray
    target: np.ndarray
    section_id: str
    origin: tuple[int, int]
    is_foreground: bool = field(default=False)

    def __post_init__(self):
        if self.pixels.shape != self.target.shape:
            raise ShapeMismatchError(
                f"patch pixels shape {self.pixels.shape} != target shape {self.target.shape}"
            )
        self.is_foreground = bool((self.target > 0).any())


def binarize_labels(mask: LabelMask, included_classes) -> np.ndarray:
    """Collapse class codes to a {0,1} target: 1 iff code is in included_classes."""
    classes = tuple(sorted(set(included_classes)))
    if not classes:
        raise ValidationError("included_classes must not be empty")
    return np.isin(mask.labels, classes).astype(np.uint8)


def zscore_normalize(patch: np.ndarray) -> np.ndarray:
    """Per-patch z-score with a 1e-8 std floor (constant patches map to zero)."""
    patch = np.asarray(patch, dtype=np.float32)
    if patch.size == 0:
        raise ValidationError("cannot normalize an empty patch")
    mean = float(patch.mean(dtype=np.float64))
    std = float(patch.std(dtype=np.float64))
    return ((patch - mean) / max(std, EPS_STD)).astype(np.float32)


def _clamped_origin(pixel: tuple[int, int], patch: int, shape: tuple[int, int], rng) -> tuple[int, int]:
    # place the patch so `pixel` falls at a uniform offset inside it, then
    # clamp to bounds; clamping keeps the pixel inside because the shift is
    # always toward it
    r = int(pixel[0]) - int(rng.integers(0, patch))
    c = int(pixel[1]) - int(rng.integers(0, patch))
    r = min(max(r, 0), shape[0] - patch)
    c = min(max(c, 0), shape[1] - patch)
    return r, c


def sample_patches(
    section: SectionImage,
    target: np.ndarray,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> list[PatchSample]:
    """Draw cfg.patches_per_section normalized patches from one section.

    The first ceil(foreground_fraction * n) samples are foreground-guaranteed
    (patch placed around a uniformly chosen positive pixel); the rest are
    uniform positions. Sections with no positive pixels yield all-background
    samples and a RuntimeWarning.
    """
    target = np.asarray(target)
    if target.shape != section.pixels.shape:
        raise ShapeMismatchError(
            f"section {section.section_id!r}: target shape {target.shape} "
            f"!= image shape {section.pixels.shape}"
        )
    h, w = section.pixels.shape
    p = cfg.patch_size
    if h < p or w < p:
        raise ValidationError(
            f"section {section.section_id!r} shape {(h, w)} smaller than patch_size {p}"
        )

    n = cfg.patches_per_section
    n_fg = math.ceil(cfg.foreground_fraction * n)
    positives = np.argwhere(target > 0)
    if n_fg > 0 and len(positives) == 0:
        warnings.warn(
            f"section {section.section_id!r} has no positive pixels; "
            f"all {n} samples are background",
            RuntimeWarning,
            stacklevel=2,
        )
        n_fg = 0

    samples = []
    for i in range(n):
        if i < n_fg:
            pix = positives[int(rng.integers(len(positives)))]
            r, c = _clamped_origin((pix[0], pix[1]), p, (h, w), rng)
        else:
            r = int(rng.integers(0, h - p + 1))
            c = int(rng.integers(0, w - p + 1))
        samples.append(
            PatchSample(
                pixels=zscore_normalize(section.pixels[r : r + p, c : c + p]),
                target=(target[r : r + p, c : c + p] > 0).astype(np.uint8),
                section_id=section.section_id,
                origin=(r, c),
            )
        )
    return samples


def elastic_displacement_field(
    shape: tuple[int, int], grid: int, max_displacement: float, rng
) -> np.ndarray:
    """Smooth random displacement field, returned as a (2, H, W) array.

    Control points on a grid x grid lattice get iid uniform displacements in
    [-max_displacement, +max_displacement]; the field between them is cubic
    interpolation of the lattice.
    """
    coarse = rng.uniform(-max_displacement, max_displacement, size=(2, grid, grid))
    rows = np.linspace(0, grid - 1, shape[0])
    cols = np.linspace(0, grid - 1, shape[1])
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    field_full = np.empty((2,) + tuple(shape), dtype=np.float64)
    for axis in range(2):
        field_full[axis] = ndimage.map_coordinates(
            coarse[axis], [grid_r, grid_c], order=3, mode="nearest"
        )
    return field_full


def elastic_warp(
    pixels: np.ndarray, target: np.ndarray, displacement: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Warp pixels (bilinear) and target (nearest) by one displacement field."""
    h, w = pixels.shape
    grid_r, grid_c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = [grid_r + displacement[0], grid_c + displacement[1]]
    warped = ndimage.map_coordinates(
        pixels.astype(np.float32), coords, order=1, mode="reflect"
    ).astype(np.float32)
    warped_target = ndimage.map_coordinates(target, coords, order=0, mode="reflect")
    return warped, warped_target.astype(target.dtype)


def augment(sample: PatchSample, cfg: SamplerConfig, rng: np.random.Generator) -> PatchSample:
    """Random flips plus optional elastic deformation, identical on pixels and target."""
    pixels, target = sample.pixels, sample.target
    if rng.random() < cfg.flip_probability:
        pixels, target = pixels[:, ::-1], target[:, ::-1]
    if rng.random() < cfg.flip_probability:
        pixels, target = pixels[::-1, :], target[::-1, :]
    if rng.random() < cfg.elastic_probability:
        disp = elastic_displacement_field(
            pixels.shape, cfg.elastic_grid, cfg.elastic_max_displacement_px, rng
        )
        pixels, target = elastic_warp(np.ascontiguousarray(pixels), np.ascontiguousarray(target), disp)
    return PatchSample(
        pixels=np.ascontiguousarray(pixels),
        target=np.ascontiguousarray(target),
        section_id=sample.section_id,
        origin=sample.origin,
    )
