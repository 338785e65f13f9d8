"""Synthetic tracer-slide sections with known ground truth.

Each section is built from:
  - Gaussian background noise;
  - curvilinear bundles: a smooth random-walk center line swept with a
    class-dependent density of short bright streaks (dense > moderate >
    sparse), labeled with the class code over the swept envelope;
  - terminal-field distractors: diffuse bright blobs that stay label 0, the
    thing a correct model must refuse to segment;
  - a convex elliptical outline covering roughly 60% of the canvas. A fixed
    share of bundles is deliberately placed fully outside it so outline
    exclusion is exercised; the rest lie fully inside.

Everything is a pure function of SynthSpec.seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.draw import disk, line

from .errors import ValidationError
from .slide_io import (
    DatasetManifest,
    LabelMask,
    ManifestEntry,
    OutlineMask,
    SectionImage,
    save_image,
    save_manifest,
    save_mask,
    save_outline,
)

# intensity added by a terminal blob must reach well past mean + 2*std of the
# background so blobs are unambiguous bright distractors
_BLOB_RECORD_THRESHOLD = 12.0
_PLACEMENT_MARGIN_PX = 6
_BLOB_MARGIN_PX = 14
OUTSIDE_BUNDLE_FRACTION = 0.2


@dataclass
class SynthSpec:
    canvas: tuple[int, int] = (512, 512)
    n_bundles_per_class: dict[int, int] = field(default_factory=lambda: {1: 3, 2: 2, 3: 2})
    n_terminal_fields: int = 2
    background_mean: float = 25.0
    background_std: float = 6.0
    width_px: dict[int, tuple[float, float]] = field(
        default_factory=lambda: {1: (9.0, 14.0), 2: (8.0, 12.0), 3: (7.0, 11.0)}
    )
    curvature: tuple[float, float] = (0.04, 0.16)
    # expected streaks per center-line step; the realized count is Poisson
    streak_density: dict[int, float] = field(
        default_factory=lambda: {1: 2.2, 2: 0.9, 3: 0.35}
    )
    seed: int = 0

    def __post_init__(self):
        if min(self.canvas) < 256:
            raise ValidationError(f"canvas dims must be >= 256, got {self.canvas}")
        self.canvas = (int(self.canvas[0]), int(self.canvas[1]))
        self.n_bundles_per_class = {int(k): int(v) for k, v in self.n_bundles_per_class.items()}
        self.width_px = {int(k): tuple(v) for k, v in self.width_px.items()}
        self.streak_density = {int(k): float(v) for k, v in self.streak_density.items()}
        for d in (self.n_bundles_per_class, self.width_px, self.streak_density):
            bad = set(d) - {1, 2, 3}
            if bad:
                raise ValidationError(f"unknown class codes {sorted(bad)} in spec")
        dens = self.streak_density
        if not dens.get(1, 1.0) > dens.get(2, 0.5) > dens.get(3, 0.0):
            raise ValidationError(
                f"streak densities must be ordered dense > moderate > sparse, got {dens}"
            )
        if self.n_terminal_fields < 0:
            raise ValidationError("n_terminal_fields must be >= 0")
        if not self.background_std >= 0:
            raise ValidationError("background_std must be >= 0")


def _make_outline(shape: tuple[int, int], rng) -> np.ndarray:
    h, w = shape
    cr = h * (0.5 + rng.uniform(-0.03, 0.03))
    cc = w * (0.5 + rng.uniform(-0.03, 0.03))
    ar = h * rng.uniform(0.40, 0.46)
    ac = w * rng.uniform(0.40, 0.46)
    rows, cols = np.ogrid[:h, :w]
    return ((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2 <= 1.0


def _curve(start: tuple[float, float], heading: float, length: float, kappa: float, rng):
    """Center-line points of one bundle: a constant-speed walk with jittered heading."""
    step = 2.0
    n = max(8, int(length / step))
    pts = np.empty((n, 2))
    r, c = start
    theta = heading
    for i in range(n):
        pts[i] = (r, c)
        theta += rng.uniform(-kappa, kappa)
        r += step * math.sin(theta)
        c += step * math.cos(theta)
    return pts


def _sweep_envelope(shape, pts, width) -> np.ndarray:
    env = np.zeros(shape, dtype=bool)
    radius = max(1.0, width / 2.0)
    for r, c in pts:
        rr, cc = disk((r, c), radius, shape=shape)
        env[rr, cc] = True
    return env


def _curve_in_bounds(shape, pts, width) -> bool:
    m = width / 2.0 + 1.0
    return bool(
        (pts[:, 0] >= m).all()
        and (pts[:, 1] >= m).all()
        and (pts[:, 0] < shape[0] - m).all()
        and (pts[:, 1] < shape[1] - m).all()
    )


def _draw_streaks(image, pts, width, density, rng) -> int:
    """Scatter short bright segments along the curve; returns how many were drawn.

    density is the expected number of streaks per center-line step (Poisson
    realized), offset uniformly across the bundle width, so classes separate
    by how much of the envelope lights up.
    """
    shape = image.shape
    drawn = 0
    n = len(pts)
    headings = np.arctan2(np.gradient(pts[:, 0]), np.gradient(pts[:, 1]))
    for i in range(n):
        for _ in range(int(rng.poisson(density))):
            theta = headings[i] + rng.uniform(-0.35, 0.35)
            offset = rng.uniform(-width / 2.0, width / 2.0)
            perp = headings[i] + math.pi / 2.0
            r0 = pts[i, 0] + offset * math.sin(perp)
            c0 = pts[i, 1] + offset * math.cos(perp)
            seg = rng.uniform(3.0, 8.0)
            r1 = r0 + seg * math.sin(theta)
            c1 = c0 + seg * math.cos(theta)
            rr, cc = line(int(round(r0)), int(round(c0)), int(round(r1)), int(round(c1)))
            keep = (rr >= 0) & (rr < shape[0]) & (cc >= 0) & (cc < shape[1])
            if not keep.any():
                continue
            value = rng.uniform(170.0, 255.0)
            np.maximum.at(image, (rr[keep], cc[keep]), value)
            drawn += 1
    return drawn


def _place_bundle(shape, outline, occupied, class_code, want_inside, spec, rng):
    """Find a curve whose envelope avoids occupied space and respects the outline side.

    Retries with progressively shorter curves; placement failure after many
    attempts raises, which at the default bundle counts indicates an
    overcrowded spec.
    """
    lo, hi = spec.width_px[class_code]
    base_len = rng.uniform(0.25, 0.42) * min(shape)
    if not want_inside:
        base_len *= 0.55
    for attempt in range(240):
        length = base_len * (0.88 ** (attempt // 20))
        width = rng.uniform(lo, hi)
        kappa = rng.uniform(*spec.curvature)
        start = (rng.uniform(0, shape[0]), rng.uniform(0, shape[1]))
        heading = rng.uniform(0, 2 * math.pi)
        pts = _curve(start, heading, length, kappa, rng)
        if not _curve_in_bounds(shape, pts, width):
            continue
        env = _sweep_envelope(shape, pts, width)
        inside_frac = outline[env].mean() if env.any() else 0.0
        if want_inside and inside_frac < 1.0:
            continue
        if not want_inside and inside_frac > 0.0:
            continue
        if (env & occupied).any():
            continue
        return pts, width, env
    raise ValidationError(
        f"could not place a class-{class_code} bundle after 240 attempts; "
        "reduce bundle counts or enlarge the canvas"
    )


def _place_blob(shape, outline, occupied, rng):
    for attempt in range(240):
        radius = rng.uniform(14.0, 26.0)
        r = rng.uniform(radius, shape[0] - radius)
        c = rng.uniform(radius, shape[1] - radius)
        rr, cc = disk((r, c), radius + _BLOB_MARGIN_PX, shape=shape)
        if not outline[rr, cc].all():
            continue
        if occupied[rr, cc].any():
            continue
        return r, c, radius
    raise ValidationError("could not place a terminal field; spec is overcrowded")


def generate_section_full(
    spec: SynthSpec,
) -> tuple[SectionImage, LabelMask, OutlineMask, np.ndarray]:
    """Like generate_section but also returns the terminal-field mask.

    The extra mask marks pixels brightened by distractor blobs and exists so
    tooling can check that a model is not segmenting terminals; it is not
    part of the ground truth.
    """
    rng = np.random.default_rng(spec.seed)
    shape = spec.canvas
    sid = f"synth-{spec.seed}"

    image = rng.normal(spec.background_mean, spec.background_std, size=shape)
    outline = _make_outline(shape, rng)
    labels = np.zeros(shape, dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    dilate = np.ones((2 * _PLACEMENT_MARGIN_PX + 1,) * 2, dtype=bool)

    order = [c for c in (1, 2, 3) for _ in range(spec.n_bundles_per_class.get(c, 0))]
    total = len(order)
    n_outside = max(1, round(OUTSIDE_BUNDLE_FRACTION * total)) if total else 0
    outside_idx = set(rng.choice(total, size=n_outside, replace=False).tolist()) if total else set()

    for i, class_code in enumerate(order):
        want_inside = i not in outside_idx
        pts, width, env = _place_bundle(
            shape, outline, occupied, class_code, want_inside, spec, rng
        )
        labels[env] = class_code
        drawn = _draw_streaks(image, pts, width, spec.streak_density[class_code], rng)
        if drawn == 0:
            # a bundle with no streak would be invisible; force one at the middle
            mid = pts[len(pts) // 2]
            rr, cc = disk((mid[0], mid[1]), 2.0, shape=shape)
            np.maximum.at(image, (rr, cc), 220.0)
        occupied |= ndimage.binary_dilation(env, structure=dilate)

    terminal_mask = np.zeros(shape, dtype=bool)
    rows, cols = np.ogrid[: shape[0], : shape[1]]
    for _ in range(spec.n_terminal_fields):
        r, c, radius = _place_blob(shape, outline, occupied, rng)
        peak = rng.uniform(120.0, 190.0)
        profile = peak * np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2 * (radius / 2.0) ** 2))
        speckle = rng.normal(0.0, 4.0, size=shape)
        bump = np.clip(profile + np.where(profile > 1.0, speckle, 0.0), 0.0, None)
        image += bump
        terminal_mask |= profile > _BLOB_RECORD_THRESHOLD
        occupied |= ndimage.binary_dilation(
            terminal_mask, structure=np.ones((3, 3), dtype=bool), iterations=_BLOB_MARGIN_PX
        )

    pixels = np.clip(image, 0.0, 255.0).round().astype(np.uint8)
    section = SectionImage(section_id=sid, brain_id="synth", pixels=pixels)
    return (
        section,
        LabelMask(section_id=sid, labels=labels),
        OutlineMask(section_id=sid, inside=outline),
        terminal_mask,
    )


def generate_section(spec: SynthSpec) -> tuple[SectionImage, LabelMask, OutlineMask]:
    """Render one synthetic section: image, class labels, and outline."""
    section, labels, outline, _ = generate_section_full(spec)
    return section, labels, outline


def _derived_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def split_counts(n_sections: int) -> tuple[int, int, int]:
    """(train, test, unlabeled) counts: roughly 20% test and 20% unlabeled."""
    if n_sections < 1:
        raise ValidationError("n_sections must be >= 1")
    n_test = round(0.2 * n_sections) if n_sections >= 3 else 0
    n_unlabeled = round(0.2 * n_sections) if n_sections >= 5 else 0
    return n_sections - n_test - n_unlabeled, n_test, n_unlabeled


def generate_dataset(
    spec_template: SynthSpec,
    n_sections: int,
    out_dir: str | Path,
    seed: int,
) -> DatasetManifest:
    """Write a full synthetic dataset and its manifest under out_dir.

    Sections are assigned to train/test/unlabeled splits in order; section i
    is generated from a seed derived from (seed, i), so the same call is
    reproducible file for file. Terminal-field masks are written next to the
    ground truth for auditing but are not referenced by the manifest.
    """
    out_dir = Path(out_dir)
    n_train, n_test, n_unlabeled = split_counts(n_sections)
    entries = []
    for i in range(n_sections):
        sid = f"s{i:03d}"
        spec = replace(spec_template, seed=_derived_seed(seed, i))
        section, labels, outline, terminal = generate_section_full(spec)
        split = "train" if i < n_train else ("test" if i < n_train + n_test else "unlabeled")

        image_path = out_dir / "images" / f"{sid}.png"
        save_image(image_path, section.pixels)
        label_path = outline_path = None
        if split != "unlabeled":
            label_path = out_dir / "masks" / f"{sid}_mask.png"
            save_mask(label_path, labels.labels)
            outline_path = out_dir / "outlines" / f"{sid}_outline.png"
            save_outline(outline_path, outline.inside)
            save_outline(out_dir / "terminals" / f"{sid}_terminals.png", terminal)
        entries.append(
            ManifestEntry(
                section_id=sid,
                brain_id=f"brain{i % 2}",
                image_path=image_path,
                split=split,
                label_path=label_path,
                outline_path=outline_path,
                section_index=i,
            )
        )
    manifest = DatasetManifest(entries=entries)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
