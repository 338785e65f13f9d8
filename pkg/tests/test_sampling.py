import numpy as np
import pytest

from bundleseg.errors import ShapeMismatchError, ValidationError
from bundleseg.sampling import (
    PatchSample,
    SamplerConfig,
    augment,
    binarize_labels,
    elastic_displacement_field,
    elastic_warp,
    sample_patches,
    zscore_normalize,
)
from bundleseg.slide_io import LabelMask, SectionImage


def _section(pixels, sid="s"):
    return SectionImage(section_id=sid, brain_id="b", pixels=pixels)


def _cfg(**kw):
    kw.setdefault("patch_size", 32)
    kw.setdefault("patches_per_section", 8)
    return SamplerConfig(**kw)


def test_binarize_labels():
    mask = LabelMask("s", np.array([[0, 1], [2, 3]], dtype=np.uint8))
    assert binarize_labels(mask, {1, 2}).tolist() == [[0, 1], [1, 0]]
    assert binarize_labels(mask, {1, 2, 3}).tolist() == [[0, 1], [1, 1]]
    with pytest.raises(ValidationError):
        binarize_labels(mask, set())


def test_zscore_basics():
    out = zscore_normalize(np.array([1.0, 3.0]))
    assert out.tolist() == [-1.0, 1.0]
    assert np.all(zscore_normalize(np.full((4, 4), 7.0)) == 0)
    # population std: sqrt(8/3)
    out = zscore_normalize(np.array([0.0, 2.0, 4.0]))
    assert out == pytest.approx([-1.2247449, 0.0, 1.2247449], abs=1e-6)


def test_zscore_statistics():
    rng = np.random.default_rng(7)
    patch = rng.uniform(0, 255, size=(64, 64))
    out = zscore_normalize(patch)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1.0) < 1e-5


def test_sampler_config_invariants():
    with pytest.raises(ValidationError):
        _cfg(patch_size=8)
    with pytest.raises(ValidationError):
        _cfg(foreground_fraction=1.5)
    with pytest.raises(ValidationError):
        _cfg(included_classes=())
    with pytest.raises(ValidationError):
        _cfg(included_classes=(0, 1))


def test_sample_patches_stratification():
    rng_img = np.random.default_rng(0)
    pixels = rng_img.integers(0, 255, size=(128, 128)).astype(np.uint8)
    target = np.zeros((128, 128), dtype=np.uint8)
    target[60:70, 60:70] = 1
    cfg = _cfg(patches_per_section=20, foreground_fraction=0.5)
    samples = sample_patches(_section(pixels), target, cfg, np.random.default_rng(1))
    assert len(samples) == 20
    # guaranteed half leads the list and is foreground by construction
    assert all(s.is_foreground for s in samples[:10])
    assert sum(s.is_foreground for s in samples) >= 10
    for s in samples:
        assert s.pixels.shape == (32, 32)
        assert s.target.shape == (32, 32)
        assert s.is_foreground == bool(s.target.any())
        r, c = s.origin
        assert 0 <= r <= 96 and 0 <= c <= 96


def test_sample_patches_single_positive_pixel():
    pixels = np.zeros((64, 64), dtype=np.uint8)
    target = np.zeros((64, 64), dtype=np.uint8)
    target[10, 10] = 1
    cfg = _cfg(patches_per_section=4, foreground_fraction=1.0)
    samples = sample_patches(_section(pixels), target, cfg, np.random.default_rng(3))
    assert len(samples) == 4
    for s in samples:
        r, c = s.origin
        assert r <= 10 < r + 32 and c <= 10 < c + 32
        assert s.target.sum() == 1


def test_sample_patches_no_foreground_warns():
    pixels = np.zeros((64, 64), dtype=np.uint8)
    target = np.zeros((64, 64), dtype=np.uint8)
    with pytest.warns(RuntimeWarning, match="no positive pixels"):
        samples = sample_patches(_section(pixels), target, _cfg(), np.random.default_rng(4))
    assert len(samples) == 8
    assert not any(s.is_foreground for s in samples)


def test_sample_patches_deterministic():
    rng_img = np.random.default_rng(5)
    pixels = rng_img.integers(0, 255, size=(96, 96)).astype(np.uint8)
    target = (pixels > 240).astype(np.uint8)
    a = sample_patches(_section(pixels), target, _cfg(), np.random.default_rng(42))
    b = sample_patches(_section(pixels), target, _cfg(), np.random.default_rng(42))
    for sa, sb in zip(a, b):
        assert sa.origin == sb.origin
        assert np.array_equal(sa.pixels, sb.pixels)
        assert np.array_equal(sa.target, sb.target)


def test_sample_patches_errors():
    pixels = np.zeros((16, 16), dtype=np.uint8)
    with pytest.raises(ValidationError, match="smaller than patch"):
        sample_patches(_section(pixels), np.zeros((16, 16)), _cfg(), np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        sample_patches(
            _section(np.zeros((64, 64))), np.zeros((32, 32)), _cfg(), np.random.default_rng(0)
        )


def test_patch_sample_recomputes_foreground_flag():
    s = PatchSample(
        pixels=np.zeros((4, 4), dtype=np.float32),
        target=np.zeros((4, 4), dtype=np.uint8),
        section_id="s",
        origin=(0, 0),
        is_foreground=True,
    )
    assert s.is_foreground is False
    with pytest.raises(ShapeMismatchError):
        PatchSample(np.zeros((4, 4)), np.zeros((4, 5)), "s", (0, 0))


def test_flips_applied_identically():
    pixels = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    assert np.array_equal(pixels[:, ::-1], np.array([[2, 1], [4, 3]]))
    target = np.array([[1, 0], [0, 0]], dtype=np.uint8)
    sample = PatchSample(pixels, target, "s", (0, 0))
    cfg = _cfg(patch_size=16, elastic_probability=0.0, flip_probability=1.0)
    out = augment(sample, cfg, np.random.default_rng(0))
    # both flips fire at probability 1: H then V
    assert np.array_equal(out.pixels, pixels[::-1, ::-1])
    assert np.array_equal(out.target, target[::-1, ::-1])


def test_zero_displacement_is_identity():
    rng = np.random.default_rng(8)
    pixels = rng.random((32, 32)).astype(np.float32)
    target = (pixels > 0.8).astype(np.uint8)
    disp = np.zeros((2, 32, 32))
    wp, wt = elastic_warp(pixels, target, disp)
    assert np.allclose(wp, pixels)
    assert np.array_equal(wt, target)


def test_elastic_field_shape_and_bounds():
    field = elastic_displacement_field((48, 40), grid=8, max_displacement=20.0,
                                       rng=np.random.default_rng(9))
    assert field.shape == (2, 48, 40)
    # cubic interpolation can overshoot control values slightly, not wildly
    assert np.abs(field).max() < 20.0 * 1.5


def test_augment_preserves_shape_and_binarity():
    rng = np.random.default_rng(10)
    for trial in range(20):
        pixels = rng.random((32, 32)).astype(np.float32)
        target = (rng.random((32, 32)) > 0.7).astype(np.uint8)
        sample = PatchSample(pixels, target, "s", (0, 0))
        out = augment(sample, _cfg(), rng)
        assert out.pixels.shape == (32, 32)
        assert out.target.shape == (32, 32)
        assert set(np.unique(out.target)).issubset({0, 1})
        assert out.is_foreground == bool(out.target.any())


def test_augment_deterministic():
    rng_img = np.random.default_rng(11)
    pixels = rng_img.random((32, 32)).astype(np.float32)
    target = (pixels > 0.5).astype(np.uint8)
    sample = PatchSample(pixels, target, "s", (0, 0))
    a = augment(sample, _cfg(), np.random.default_rng(77))
    b = augment(sample, _cfg(), np.random.default_rng(77))
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.target, b.target)
