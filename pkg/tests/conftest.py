import numpy as np
import pytest

from bundleseg.slide_io import (
    DatasetManifest,
    ManifestEntry,
    save_image,
    save_manifest,
    save_mask,
    save_outline,
)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_dataset(tmp_path):
    """Two labeled train sections, one test, one unlabeled, 64x64 each."""
    rng = np.random.default_rng(99)
    entries = []
    for i, split in enumerate(["train", "train", "test", "unlabeled"]):
        sid = f"t{i:02d}"
        pixels = rng.integers(0, 200, size=(64, 64), dtype=np.uint8).astype(np.uint8)
        labels = np.zeros((64, 64), dtype=np.uint8)
        labels[10:20, 10:30] = 1
        labels[40:50, 5:15] = 3
        outline = np.zeros((64, 64), dtype=np.uint8)
        outline[4:60, 4:60] = 1
        image_path = tmp_path / "images" / f"{sid}.png"
        save_image(image_path, pixels)
        label_path = outline_path = None
        if split != "unlabeled":
            label_path = tmp_path / "masks" / f"{sid}.png"
            save_mask(label_path, labels)
            outline_path = tmp_path / "outlines" / f"{sid}.png"
            save_outline(outline_path, outline)
        entries.append(
            ManifestEntry(
                section_id=sid,
                brain_id=f"b{i % 2}",
                image_path=image_path,
                split=split,
                label_path=label_path,
                outline_path=outline_path,
                section_index=i,
            )
        )
    manifest = DatasetManifest(entries=entries)
    path = tmp_path / "manifest.json"
    save_manifest(manifest, path)
    return path
