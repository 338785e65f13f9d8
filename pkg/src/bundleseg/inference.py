"""Ensembled sliding-window prediction and post-processing.

Tiles are taken on a regular stride grid plus a clamped final position per
axis so every pixel is covered; each tile is z-scored exactly as in
training, pushed through every ensemble member, and the sigmoid outputs are
averaged. Overlapping tile predictions are blended by unweighted averaging
(sum and count accumulators), so a constant model yields a seam-free
constant map. Post-processing: Gaussian smoothing with reflected borders,
thresholding, then dropping small connected components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ShapeMismatchError, ValidationError
from .sampling import zscore_normalize
from .slide_io import SectionImage
from .unet import ModelState, load_checkpoint, predict_probabilities


@dataclass
class InferenceConfig:
    patch_size: int = 1024
    stride_fraction: float = 0.25
    ensemble: list[str] = field(default_factory=list)
    gaussian_sigma_px: float = 2.0
    threshold: float = 0.5
    min_component_area_px: int = 50

    def __post_init__(self):
        if not 0 < self.stride_fraction <= 1:
            raise ValidationError(
                f"stride_fraction must be in (0, 1], got {self.stride_fraction}"
            )
        if not 0 < self.threshold < 1:
            raise ValidationError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.min_component_area_px < 0:
            raise ValidationError("min_component_area_px must be >= 0")
        if self.patch_size < 1:
            raise ValidationError(f"patch_size must be >= 1, got {self.patch_size}")

    @property
    def stride(self) -> int:
        return max(1, round(self.patch_size * self.stride_fraction))


@dataclass
class ProbabilityMap:
    section_id: str
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs)
        if self.probs.ndim != 2:
            raise ValidationError("probability map must be 2D")
        if self.probs.size and (self.probs.min() < -1e-6 or self.probs.max() > 1 + 1e-6):
            raise ValidationError(
                f"probabilities out of [0,1]: min {self.probs.min()}, max {self.probs.max()}"
            )


def tile_positions(height: int, width: int, patch_size: int, stride: int) -> list[tuple[int, int]]:
    """Top-left corners of a covering tile grid, row-major.

    Positions step by `stride` from 0 and a final clamped position at
    dim - patch_size is appended when the stride grid stops short of it.
    """
    if height < patch_size or width < patch_size:
        raise ValidationError(
            f"image ({height}x{width}) smaller than patch_size {patch_size}; "
            "reflect-pad before tiling"
        )
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")

    def _axis(dim):
        xs = list(range(0, dim - patch_size + 1, stride))
        if xs[-1] != dim - patch_size:
            xs.append(dim - patch_size)
        return xs

    return [(r, c) for r in _axis(height) for c in _axis(width)]


def _reflect_pad_to(pixels: np.ndarray, min_h: int, min_w: int) -> np.ndarray:
    # numpy reflect-padding is capped at size-1 per call, so iterate; a
    # 1-pixel axis has nothing to reflect and falls back to edge replication
    for axis, target in ((0, min_h), (1, min_w)):
        while pixels.shape[axis] < target:
            need = target - pixels.shape[axis]
            cap = pixels.shape[axis] - 1
            pad = [(0, 0), (0, 0)]
            if cap == 0:
                pad[axis] = (0, need)
                pixels = np.pad(pixels, pad, mode="edge")
            else:
                pad[axis] = (0, min(need, cap))
                pixels = np.pad(pixels, pad, mode="reflect")
    return pixels


def _member_probs(member, batch: torch.Tensor) -> torch.Tensor:
    if isinstance(member, ModelState):
        return predict_probabilities(member, batch)
    # callables (used by tests and tooling) must already return probabilities
    return torch.as_tensor(member(batch))


def _check_compatible(models) -> None:
    states = [m for m in models if isinstance(m, ModelState)]
    for m in states[1:]:
        if m.config != states[0].config:
            raise ValidationError(
                "ensemble members have incompatible architectures: "
                f"{states[0].config} vs {m.config}"
            )


def load_ensemble(cfg: InferenceConfig) -> list[ModelState]:
    if not cfg.ensemble:
        raise ValidationError("inference config lists no ensemble checkpoints")
    models = [load_checkpoint(Path(p)) for p in cfg.ensemble]
    _check_compatible(models)
    return models


def predict_section(
    cfg: InferenceConfig, section: SectionImage, models=None
) -> ProbabilityMap:
    """Predict one full section by tiled ensemble inference.

    models defaults to loading cfg.ensemble from disk; entries may be
    ModelState instances or callables mapping a Bx1xPxP tensor to
    probabilities of the same shape. Sections smaller than the patch are
    reflect-padded and the map cropped back.
    """
    if models is None:
        models = load_ensemble(cfg)
    if not models:
        raise ValidationError("empty ensemble")
    _check_compatible(models)

    pixels = np.asarray(section.pixels, dtype=np.float32)
    h0, w0 = pixels.shape
    p = cfg.patch_size
    pixels = _reflect_pad_to(pixels, p, p)
    h, w = pixels.shape

    acc = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.int64)
    with torch.no_grad():
        for r, c in tile_positions(h, w, p, cfg.stride):
            tile = zscore_normalize(pixels[r : r + p, c : c + p])
            batch = torch.from_numpy(tile).reshape(1, 1, p, p)
            member_probs = [
                _member_probs(m, batch).double().reshape(p, p).numpy() for m in models
            ]
            acc[r : r + p, c : c + p] += np.mean(member_probs, axis=0)
            count[r : r + p, c : c + p] += 1

    if count.min() < 1:
        raise ValidationError("tiling failed to cover the section")
    probs = acc / count
    return ProbabilityMap(section_id=section.section_id, probs=probs[:h0, :w0])


def postprocess(cfg: InferenceConfig, pmap: ProbabilityMap) -> np.ndarray:
    """Smooth, threshold, and drop small components; returns a uint8 mask."""
    probs = pmap.probs
    if cfg.gaussian_sigma_px > 0:
        probs = ndimage.gaussian_filter(probs, sigma=cfg.gaussian_sigma_px, mode="mirror")
    mask = probs >= cfg.threshold
    return remove_small_components(mask, cfg.min_component_area_px)


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    mask = np.asarray(mask) > 0
    if min_area > 1 and mask.any():
        labeled, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        sizes = np.bincount(labeled.ravel())
        keep = sizes >= min_area
        keep[0] = False
        mask = keep[labeled]
    return mask.astype(np.uint8)


def render_overlay(
    pixels: np.ndarray, mask: np.ndarray, gt_labels: np.ndarray | None = None
) -> np.ndarray:
    """RGB render of a section with prediction contours (and GT fills) for audit.

    Prediction boundaries are drawn yellow; ground-truth classes, when given,
    tint the underlying pixels green (dense), cyan (moderate), red (sparse).
    """
    img = np.asarray(pixels, dtype=np.float64)
    lo, hi = img.min(), img.max()
    norm = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    rgb = np.stack([norm] * 3, axis=-1)

    if gt_labels is not None:
        tints = {1: (0.0, 1.0, 0.0), 2: (0.0, 1.0, 1.0), 3: (1.0, 0.2, 0.2)}
        for code, color in tints.items():
            sel = gt_labels == code
            for ch in range(3):
                rgb[..., ch][sel] = 0.5 * rgb[..., ch][sel] + 0.5 * color[ch]

    mask = np.asarray(mask) > 0
    boundary = mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool))
    rgb[boundary] = (1.0, 1.0, 0.0)
    return (rgb * 255).round().astype(np.uint8)
