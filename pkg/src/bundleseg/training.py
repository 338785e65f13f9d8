"""Supervised training with k-fold cross-validation, reconstruction
pre-training, and transfer of pretrained weights into the segmentation net.

Determinism: every random choice draws from a generator derived from the
config seed plus a purpose label (fold assignment, init, per-section
per-epoch sampling, batch order), so one integer pins the whole run.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, TrainingDivergedError, ValidationError
from .losses import LossConfig, mse_loss, total_loss
from .sampling import PatchSample, SamplerConfig, augment, binarize_labels, sample_patches
from .slide_io import DatasetManifest, ManifestEntry, load_section
from .unet import ModelState, UNetConfig, build_unet


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1000
    batch_size: int = 2
    folds: int = 5
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pretrained_checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass
class PretrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-4
    batch_size: int = 2
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Independent generator stream for (seed, purpose...) tuples.

    String parts are hashed so streams stay stable across runs and
    machines; integers pass through.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for p in parts:
        if isinstance(p, str):
            entropy.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little"))
        else:
            entropy.append(int(p) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def derive_int(seed: int, *parts) -> int:
    return int(derive_rng(seed, *parts).integers(0, 2**63 - 1))


def make_folds(manifest: DatasetManifest, k: int, seed: int) -> dict[str, int]:
    """Assign each labeled train section to one of k folds, stratified by brain.

    Sections are shuffled within each brain, then dealt round-robin with a
    cursor that runs across brains, so every brain's sections spread over
    folds as evenly as possible.
    """
    labeled = [e for e in manifest.by_split("train") if e.label_path is not None]
    if len(labeled) < k:
        raise ValidationError(
            f"need at least {k} labeled train sections for {k} folds, got {len(labeled)}"
        )
    rng = derive_rng(seed, "folds")
    assignment: dict[str, int] = {}
    cursor = 0
    for brain in sorted({e.brain_id for e in labeled}):
        sids = sorted(e.section_id for e in labeled if e.brain_id == brain)
        for idx in rng.permutation(len(sids)):
            assignment[sids[idx]] = cursor % k
            cursor += 1
    return assignment


def _resolve_folds(manifest: DatasetManifest, cfg: TrainConfig) -> dict[str, int]:
    labeled = [e for e in manifest.by_split("train") if e.label_path is not None]
    preassigned = {e.section_id: e.fold for e in labeled if e.fold is not None}
    if len(preassigned) == len(labeled) and labeled:
        return preassigned
    return make_folds(manifest, cfg.folds, cfg.seed)


class _MetricsLog:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, **fields):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(fields, sort_keys=True) + "\n")


@dataclass
class _LoadedSection:
    entry: ManifestEntry
    section: object
    target: np.ndarray


def _load_training_sections(
    manifest: DatasetManifest, sids, sampler: SamplerConfig
) -> list[_LoadedSection]:
    out = []
    for sid in sorted(sids):
        entry = manifest.get(sid)
        section, labels, _ = load_section(entry)
        if labels is None:
            raise ValidationError(f"section {sid!r} has no label mask; cannot train on it")
        out.append(
            _LoadedSection(entry, section, binarize_labels(labels, sampler.included_classes))
        )
    return out


def _check_patch_divisible(sampler: SamplerConfig, unet_cfg: UNetConfig) -> None:
    d = unet_cfg.divisor
    if sampler.patch_size % d:
        raise ValidationError(
            f"patch_size {sampler.patch_size} must be divisible by {d} "
            f"for levels={unet_cfg.levels}"
        )


def _batches(samples: list[PatchSample], batch_size: int):
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = torch.from_numpy(np.stack([s.pixels for s in chunk])[:, None])
        y = torch.from_numpy(np.stack([s.target for s in chunk])[:, None].astype(np.float32))
        yield x, y


def _training_loop(
    model: ModelState,
    train_secs: list[_LoadedSection],
    holdout_secs: list[_LoadedSection],
    cfg: TrainConfig,
    fold_id: int | None,
    log: _MetricsLog,
    progress=None,
) -> ModelState:
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    t0 = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        samples: list[PatchSample] = []
        for ls in train_secs:
            rng = derive_rng(cfg.seed, "sample", ls.entry.section_id, epoch)
            for s in sample_patches(ls.section, ls.target, cfg.sampler, rng):
                samples.append(augment(s, cfg.sampler, rng))
        order = derive_rng(cfg.seed, "order", epoch).permutation(len(samples))
        samples = [samples[i] for i in order]

        model.net.train()
        losses = []
        for x, y in _batches(samples, cfg.batch_size):
            opt.zero_grad()
            p = torch.sigmoid(model.net(x))
            loss = total_loss(cfg.loss, p, y)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        train_loss = float(np.mean(losses))

        holdout_loss = None
        if holdout_secs:
            model.net.eval()
            hl = []
            with torch.no_grad():
                for ls in holdout_secs:
                    rng = derive_rng(cfg.seed, "holdout", ls.entry.section_id, epoch)
                    held = sample_patches(ls.section, ls.target, cfg.sampler, rng)
                    for x, y in _batches(held, cfg.batch_size):
                        p = torch.sigmoid(model.net(x))
                        hl.append(float(total_loss(cfg.loss, p, y)))
            holdout_loss = float(np.mean(hl))

        log.record(
            epoch=epoch,
            fold=fold_id,
            train_loss=train_loss,
            holdout_loss=holdout_loss,
            wallclock=time.monotonic() - t0,
        )
        if progress:
            progress(epoch, train_loss, holdout_loss)
    return model


def train_fold(
    manifest: DatasetManifest,
    fold_id: int | None,
    cfg: TrainConfig,
    unet_cfg: UNetConfig,
    log_path: str | Path | None = None,
    init_state: ModelState | None = None,
    progress=None,
) -> ModelState:
    """Train one cross-validation fold's model.

    Trains on every labeled train section outside fold_id and logs the loss
    on the held-out fold each epoch. fold_id=None trains on all labeled
    sections with no holdout. init_state, when given, is trained in place
    (the fine-tuning path); otherwise a fresh seeded network is built.
    """
    _check_patch_divisible(cfg.sampler, unet_cfg)
    labeled_ids = [
        e.section_id for e in manifest.by_split("train") if e.label_path is not None
    ]
    if not labeled_ids:
        raise ValidationError("manifest has no labeled train sections")
    if fold_id is None:
        train_ids, holdout_ids = labeled_ids, []
    else:
        if not 0 <= fold_id < cfg.folds:
            raise ValidationError(f"fold_id must be in [0, {cfg.folds}), got {fold_id}")
        folds = _resolve_folds(manifest, cfg)
        train_ids = [s for s in labeled_ids if folds[s] != fold_id]
        holdout_ids = [s for s in labeled_ids if folds[s] == fold_id]
        if not train_ids:
            raise ValidationError(f"fold {fold_id} leaves no training sections")

    train_secs = _load_training_sections(manifest, train_ids, cfg.sampler)
    holdout_secs = _load_training_sections(manifest, holdout_ids, cfg.sampler)

    model = init_state
    if model is None:
        model = build_unet(unet_cfg, seed=derive_int(cfg.seed, "init", fold_id or 0))
        model.provenance["pretrained"] = False
    model = _training_loop(model, train_secs, holdout_secs, cfg, fold_id, _MetricsLog(log_path), progress)
    model.provenance.update(
        loss_mode=cfg.loss.mode, epochs=cfg.epochs, seed=cfg.seed, fold=fold_id
    )
    return model


def pretrain_reconstruction(
    manifest: DatasetManifest,
    cfg: PretrainConfig,
    unet_cfg: UNetConfig,
    log_path: str | Path | None = None,
    progress=None,
) -> ModelState:
    """Self-supervised reconstruction pre-training on image content only.

    Uses unlabeled sections plus the images of labeled train sections (label
    files are never opened), sampling patches uniformly and minimizing the
    reconstruction MSE of a U-Net with skip connections disabled, so the
    signal must pass through the bottleneck. Test sections are never used.
    """
    _check_patch_divisible(cfg.sampler, unet_cfg)
    unlabeled = manifest.by_split("unlabeled")
    if not unlabeled:
        raise ValidationError("manifest contains no unlabeled sections to pretrain on")
    entries = sorted(
        unlabeled + manifest.by_split("train"), key=lambda e: e.section_id
    )
    sections = [load_section(e, load_labels=False)[0] for e in entries]

    recon_cfg = replace(unet_cfg, skip_connections=False, out_channels=1)
    model = build_unet(recon_cfg, seed=derive_int(cfg.seed, "pretrain-init"))
    model.provenance.update(task="reconstruction", epochs=cfg.epochs, seed=cfg.seed)
    sampler = replace(cfg.sampler, foreground_fraction=0.0)
    log = _MetricsLog(log_path)

    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    t0 = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        samples = []
        for section in sections:
            rng = derive_rng(cfg.seed, "pretrain", section.section_id, epoch)
            zeros = np.zeros(section.pixels.shape, dtype=np.uint8)
            samples.extend(sample_patches(section, zeros, sampler, rng))
        order = derive_rng(cfg.seed, "pretrain-order", epoch).permutation(len(samples))
        samples = [samples[i] for i in order]

        model.net.train()
        losses = []
        for x, _ in _batches(samples, cfg.batch_size):
            opt.zero_grad()
            loss = mse_loss(x, model.net(x))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        log.record(
            epoch=epoch,
            fold=None,
            train_loss=float(np.mean(losses)),
            holdout_loss=None,
            wallclock=time.monotonic() - t0,
        )
        if progress:
            progress(epoch, float(np.mean(losses)), None)
    return model


_TRANSFER_FIELDS = ("levels", "base_channels", "max_channels", "in_channels")


def transfer_weights(pretrained: ModelState, target_cfg: UNetConfig, seed: int) -> ModelState:
    """Initialize a segmentation net from a reconstruction checkpoint.

    Encoder, up-convolution, and decoder weights are copied. When the target
    uses skip connections, each decoder block's first convolution sees twice
    the input channels; the up-path half (channels [0, w)) takes the
    pretrained weights and the skip-facing half keeps its fresh
    initialization. The output head is always fresh.
    """
    src_cfg = pretrained.config
    for f in _TRANSFER_FIELDS:
        if getattr(src_cfg, f) != getattr(target_cfg, f):
            raise CheckpointError(
                f"pretrained checkpoint incompatible: {f} is {getattr(src_cfg, f)}, "
                f"target needs {getattr(target_cfg, f)}"
            )

    target = build_unet(target_cfg, seed=seed)
    src_state = pretrained.net.state_dict()
    tgt_state = target.net.state_dict()
    with torch.no_grad():
        for name, src in src_state.items():
            if name.startswith("head."):
                continue
            tgt = tgt_state[name]
            if tgt.shape == src.shape:
                tgt.copy_(src)
            elif (
                tgt.ndim == 4
                and tgt.shape[0] == src.shape[0]
                and tgt.shape[1] == 2 * src.shape[1]
                and tgt.shape[2:] == src.shape[2:]
            ):
                tgt[:, : src.shape[1]].copy_(src)
            else:
                raise CheckpointError(
                    f"cannot transfer parameter {name!r}: shape {tuple(src.shape)} "
                    f"vs {tuple(tgt.shape)}"
                )
    target.net.load_state_dict(tgt_state)
    target.provenance["pretrained"] = True
    return target


def fine_tune(
    pretrained: ModelState,
    manifest: DatasetManifest,
    fold_id: int | None,
    cfg: TrainConfig,
    unet_cfg: UNetConfig,
    log_path: str | Path | None = None,
    progress=None,
) -> ModelState:
    """Transfer pretrained weights, then train as train_fold does."""
    init = transfer_weights(
        pretrained, unet_cfg, seed=derive_int(cfg.seed, "init", fold_id or 0)
    )
    model = train_fold(
        manifest, fold_id, cfg, unet_cfg, log_path=log_path, init_state=init, progress=progress
    )
    model.provenance["pretrained"] = True
    return model
