"""Configurable 2D U-Net and its checkpoint format.

The network has `levels` encoder stages (so levels-1 downsamplings); feature
width at stage l is min(base_channels * 2^l, max_channels). Each stage is a
double 3x3 convolution block; downsampling is 2x2 max-pooling, upsampling is
2x2 transposed convolution, and the head is a 1x1 convolution. Skip
connections can be disabled, which narrows the first decoder convolution of
each stage; reconstruction pre-training relies on that to force information
through the bottleneck.

Checkpoints are zip archives holding config.json (architecture + training
provenance) and weights.pt (the state dict). Zip entries use a fixed
timestamp so identical states produce identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ShapeMismatchError, ValidationError

CHECKPOINT_FORMAT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class UNetConfig:
    levels: int = 9
    base_channels: int = 32
    max_channels: int = 512
    in_channels: int = 1
    out_channels: int = 1
    activation: str = "relu"
    skip_connections: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ValidationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.max_channels < self.base_channels:
            raise ValidationError(
                f"max_channels ({self.max_channels}) must be >= base_channels ({self.base_channels})"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("in_channels and out_channels must be >= 1")
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**l, self.max_channels) for l in range(self.levels)]

    @property
    def divisor(self) -> int:
        """Spatial dims of any input must be divisible by this."""
        return 2 ** (self.levels - 1)


class _DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.conv2(self.act(self.conv1(x))))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        self.enc = nn.ModuleList()
        prev = cfg.in_channels
        for w in widths:
            self.enc.append(_DoubleConv(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        # decoder stage i refines width[levels-2-i]
        for l in range(cfg.levels - 2, -1, -1):
            self.up.append(nn.ConvTranspose2d(widths[l + 1], widths[l], 2, stride=2))
            dec_in = 2 * widths[l] if cfg.skip_connections else widths[l]
            self.dec.append(_DoubleConv(dec_in, widths[l]))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            skips.append(x)
        for i, (up, block) in enumerate(zip(self.up, self.dec)):
            x = up(x)
            if self.cfg.skip_connections:
                # up-path channels first, skip channels second; fine-tuning
                # from a skipless checkpoint relies on this order
                x = torch.cat([x, skips[self.cfg.levels - 2 - i]], dim=1)
            x = block(x)
        return self.head(x)


@dataclass
class ModelState:
    """A network plus the config that built it and how it was trained."""

    config: UNetConfig
    net: UNet
    provenance: dict = field(default_factory=dict)

    @property
    def parameters(self) -> dict[str, torch.Tensor]:
        return self.net.state_dict()


def init_weights(net: nn.Module, generator: torch.Generator) -> None:
    """He fan-in normal init on every conv weight, zero biases.

    fan_in is taken as weight.shape[1] * kernel_area for both Conv2d and
    ConvTranspose2d so the scheme is one rule applied uniformly. Draw order
    follows named_parameters order, so a given generator seed fixes every
    weight.
    """
    for name, param in sorted(net.named_parameters()):
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param.shape[1] * int(np.prod(param.shape[2:]))
                std = (2.0 / fan_in) ** 0.5
                param.copy_(
                    torch.randn(param.shape, generator=generator, dtype=param.dtype) * std
                )
            else:
                param.zero_()


def build_unet(cfg: UNetConfig, seed: int = 0) -> ModelState:
    """Construct a U-Net with seed-determined He initialization."""
    net = UNet(cfg)
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    init_weights(net, gen)
    return ModelState(config=cfg, net=net, provenance={"seed": int(seed), "pretrained": False})


def _check_batch(model: ModelState, batch: torch.Tensor) -> torch.Tensor:
    if not torch.is_tensor(batch):
        batch = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    if batch.ndim != 4:
        raise ShapeMismatchError(f"expected a BxCxHxW batch, got shape {tuple(batch.shape)}")
    cfg = model.config
    b, c, h, w = batch.shape
    if c != cfg.in_channels:
        raise ShapeMismatchError(f"expected {cfg.in_channels} input channels, got {c}")
    d = cfg.divisor
    if h % d or w % d:
        raise ShapeMismatchError(
            f"spatial dims ({h}, {w}) must be divisible by {d} for levels={cfg.levels}"
        )
    return batch.float()


def forward(model: ModelState, batch) -> torch.Tensor:
    """Run the network, returning logits with the batch's spatial shape."""
    return model.net(_check_batch(model, batch))


def predict_probabilities(model: ModelState, batch) -> torch.Tensor:
    """Sigmoid of forward()."""
    return torch.sigmoid(forward(model, batch))


def save_checkpoint(model: ModelState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "provenance": model.provenance,
    }
    buf = io.BytesIO()
    torch.save(model.net.state_dict(), buf)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("config.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        info = zipfile.ZipInfo("weights.pt", date_time=_ZIP_DATE)
        zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("config.json"))
            weights = torch.load(io.BytesIO(zf.read("weights.pt")), weights_only=True)
    except CheckpointError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path}: format version {meta.get('format_version')} "
            f"!= {CHECKPOINT_FORMAT_VERSION}"
        )
    cfg = UNetConfig(**meta["config"])
    net = UNet(cfg)
    net.load_state_dict(weights)
    return ModelState(config=cfg, net=net, provenance=meta.get("provenance", {}))


def parameter_count(model: ModelState) -> int:
    return sum(p.numel() for p in model.net.parameters())
