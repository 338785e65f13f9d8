import numpy as np
import pytest
import torch

from bundleseg.errors import ShapeMismatchError, ValidationError
from bundleseg.inference import (
    InferenceConfig,
    ProbabilityMap,
    postprocess,
    predict_section,
    remove_small_components,
    render_overlay,
    tile_positions,
)
from bundleseg.slide_io import SectionImage
from bundleseg.unet import UNetConfig, build_unet, save_checkpoint
from tests.oracles import blend_average, cover_positions


def _section(pixels, sid="s"):
    return SectionImage(section_id=sid, brain_id="b", pixels=np.asarray(pixels, dtype=np.float32))


class _Const:
    """Stub ensemble member: fixed probability everywhere."""

    def __init__(self, value):
        self.value = value

    def __call__(self, batch):
        return torch.full_like(batch, self.value)


def test_config_invariants():
    cfg = InferenceConfig(patch_size=1024, stride_fraction=0.25)
    assert cfg.stride == 256
    with pytest.raises(ValidationError):
        InferenceConfig(stride_fraction=0.0)
    with pytest.raises(ValidationError):
        InferenceConfig(stride_fraction=1.5)
    with pytest.raises(ValidationError):
        InferenceConfig(threshold=1.0)
    with pytest.raises(ValidationError):
        InferenceConfig(min_component_area_px=-1)


def test_tile_positions_examples():
    assert tile_positions(2048, 2048, 1024, 256) == [
        (r, c)
        for r in (0, 256, 512, 768, 1024)
        for c in (0, 256, 512, 768, 1024)
    ]
    assert tile_positions(1024, 1024, 1024, 256) == [(0, 0)]
    rows = sorted({r for r, _ in tile_positions(1500, 1500, 1024, 256)})
    assert rows == [0, 256, 476]
    assert len(tile_positions(1500, 1500, 1024, 256)) == 9


def test_tile_positions_cover_every_pixel():
    rng = np.random.default_rng(3)
    for _ in range(30):
        patch = int(rng.integers(2, 16))
        h = int(rng.integers(patch, 64))
        w = int(rng.integers(patch, 64))
        stride = int(rng.integers(1, patch + 1))
        pos = tile_positions(h, w, patch, stride)
        assert sorted({r for r, _ in pos}) == cover_positions(h, patch, stride)
        assert sorted({c for _, c in pos}) == cover_positions(w, patch, stride)
        covered = np.zeros((h, w), dtype=bool)
        for r, c in pos:
            covered[r : r + patch, c : c + patch] = True
        assert covered.all()


def test_tile_positions_errors():
    with pytest.raises(ValidationError):
        tile_positions(100, 100, 128, 32)
    with pytest.raises(ValidationError):
        tile_positions(100, 100, 32, 0)


def test_constant_model_leaves_no_seams():
    cfg = InferenceConfig(patch_size=64, stride_fraction=0.25)
    rng = np.random.default_rng(0)
    section = _section(rng.random((150, 130)) * 255)
    pmap = predict_section(cfg, section, models=[_Const(0.7)])
    assert pmap.probs.shape == (150, 130)
    assert pmap.probs.max() - pmap.probs.min() <= 1e-6
    assert pmap.probs[0, 0] == pytest.approx(0.7)


def test_two_member_ensemble_means():
    cfg = InferenceConfig(patch_size=32, stride_fraction=0.5)
    section = _section(np.zeros((40, 40)))
    pmap = predict_section(cfg, section, models=[_Const(0.2), _Const(0.6)])
    assert np.allclose(pmap.probs, 0.4, atol=1e-7)


def test_blending_matches_brute_force_oracle():
    # patch 4, stride 2 on an 8x8 canvas; tile value depends on tile origin
    cfg = InferenceConfig(patch_size=4, stride_fraction=0.5)

    class _PerTile:
        def __init__(self):
            self.calls = []

        def __call__(self, batch):
            value = 0.1 + 0.05 * len(self.calls)
            self.calls.append(batch.shape)
            return torch.full_like(batch, value)

    member = _PerTile()
    pmap = predict_section(cfg, _section(np.zeros((8, 8))), models=[member])
    tiles = []
    for i, pos in enumerate(tile_positions(8, 8, 4, 2)):
        tiles.append((pos, np.full((4, 4), 0.1 + 0.05 * i).tolist()))
    expected = blend_average((8, 8), tiles)
    assert np.allclose(pmap.probs, np.array(expected, dtype=float), atol=1e-12)


def test_undersized_section_reflect_padded_then_cropped():
    cfg = InferenceConfig(patch_size=64, stride_fraction=0.25)
    section = _section(np.random.default_rng(1).random((20, 90)) * 100)
    pmap = predict_section(cfg, section, models=[_Const(0.3)])
    assert pmap.probs.shape == (20, 90)
    assert np.allclose(pmap.probs, 0.3)
    tiny = _section(np.ones((3, 3)))
    pmap = predict_section(cfg, tiny, models=[_Const(0.5)])
    assert pmap.probs.shape == (3, 3)


def test_real_model_ensemble_order_invariant():
    cfg = InferenceConfig(patch_size=16, stride_fraction=0.5)
    ucfg = UNetConfig(levels=2, base_channels=4, max_channels=8)
    models = [build_unet(ucfg, seed=s) for s in (0, 1, 2)]
    section = _section(np.random.default_rng(2).random((24, 24)) * 255)
    a = predict_section(cfg, section, models=models)
    b = predict_section(cfg, section, models=models[::-1])
    assert np.abs(a.probs - b.probs).max() <= 1e-7
    assert a.probs.min() >= 0.0 and a.probs.max() <= 1.0


def test_ensemble_loaded_from_checkpoints(tmp_path):
    ucfg = UNetConfig(levels=2, base_channels=4, max_channels=8)
    paths = []
    for s in (0, 1):
        model = build_unet(ucfg, seed=s)
        p = tmp_path / f"m{s}.ckpt"
        save_checkpoint(model, p)
        paths.append(str(p))
    cfg = InferenceConfig(patch_size=16, stride_fraction=0.5, ensemble=paths)
    section = _section(np.random.default_rng(4).random((16, 16)) * 50)
    pmap = predict_section(cfg, section)
    direct = predict_section(cfg, section, models=[build_unet(ucfg, seed=0), build_unet(ucfg, seed=1)])
    assert np.array_equal(pmap.probs, direct.probs)


def test_incompatible_ensemble_rejected(tmp_path):
    a = build_unet(UNetConfig(levels=2, base_channels=4, max_channels=8), seed=0)
    b = build_unet(UNetConfig(levels=3, base_channels=4, max_channels=8), seed=0)
    cfg = InferenceConfig(patch_size=16, stride_fraction=0.5)
    with pytest.raises(ValidationError, match="incompatible"):
        predict_section(cfg, _section(np.zeros((16, 16))), models=[a, b])
    with pytest.raises(ValidationError):
        predict_section(cfg, _section(np.zeros((16, 16))), models=[])


def test_probability_map_invariants():
    with pytest.raises(ValidationError):
        ProbabilityMap(section_id="s", probs=np.full((4, 4), 1.5))
    with pytest.raises(ValidationError):
        ProbabilityMap(section_id="s", probs=np.zeros((4, 4, 2)))


def test_postprocess_small_component_removed():
    cfg = InferenceConfig(gaussian_sigma_px=0.0, threshold=0.5, min_component_area_px=50)
    probs = np.zeros((40, 40))
    probs[2:12, 2:12] = 0.9  # 100 px
    probs[30, 30:33] = 0.9  # 3 px speck
    mask = postprocess(cfg, ProbabilityMap(section_id="s", probs=probs))
    assert mask[5, 5]
    assert not mask[30, 31]
    assert mask.sum() == 100


def test_postprocess_identity_cases():
    cfg = InferenceConfig(gaussian_sigma_px=2.0, threshold=0.5, min_component_area_px=50)
    zeros = postprocess(cfg, ProbabilityMap(section_id="s", probs=np.zeros((32, 32))))
    assert not zeros.any()
    ones = postprocess(cfg, ProbabilityMap(section_id="s", probs=np.full((32, 32), 0.7)))
    assert ones.all()


def test_postprocess_idempotent_on_binary_output():
    cfg = InferenceConfig(gaussian_sigma_px=0.0, threshold=0.5, min_component_area_px=5)
    rng = np.random.default_rng(9)
    probs = (rng.random((48, 48)) < 0.4).astype(float)
    once = postprocess(cfg, ProbabilityMap(section_id="s", probs=probs))
    twice = postprocess(cfg, ProbabilityMap(section_id="s", probs=once.astype(float)))
    assert np.array_equal(once, twice)


def test_remove_small_components_threshold_semantics():
    mask = np.zeros((10, 10), dtype=bool)
    mask[0, 0:4] = True  # area 4
    mask[5, 5] = True  # area 1
    out = remove_small_components(mask, min_area=4)
    assert out[0, 1] and not out[5, 5]
    assert np.array_equal(remove_small_components(mask, min_area=0), mask)
    assert np.array_equal(remove_small_components(mask, min_area=1), mask)


def test_remove_small_components_uses_8_connectivity():
    mask = np.zeros((6, 6), dtype=bool)
    mask[0, 0] = mask[1, 1] = mask[2, 2] = True  # one diagonal chain of 3
    assert remove_small_components(mask, min_area=3).sum() == 3
    assert remove_small_components(mask, min_area=4).sum() == 0


def test_render_overlay_shapes_and_marking():
    pixels = np.zeros((16, 16), dtype=np.float32)
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:9, 4:9] = True
    rgb = render_overlay(pixels, mask)
    assert rgb.shape == (16, 16, 3)
    assert rgb.dtype == np.uint8
    assert (rgb[4, 4] != rgb[0, 0]).any()
