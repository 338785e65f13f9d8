"""Run configuration: one JSON file covering every sub-config, plus
command-line overrides and provenance records.

The JSON schema mirrors the dataclass tree:

    {
      "seed": 0,
      "manifest": "data/manifest.json",
      "output_dir": "runs/a",
      "deterministic": true,
      "unet": {...}, "train": {...}, "pretrain": {...},
      "inference": {...}, "synth": {...}
    }

Field names match the dataclasses exactly; unknown keys are rejected with
their dotted path. `--set a.b=c` overrides parse the value as JSON when
possible and as a bare string otherwise. The top-level seed propagates into
train.seed, pretrain.seed, and the sampler rng_seeds unless those are given
explicitly, so one integer steers the whole pipeline.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .inference import InferenceConfig
from .losses import LossConfig
from .sampling import SamplerConfig
from .synthgen import SynthSpec
from .training import PretrainConfig, TrainConfig
from .unet import UNetConfig


@dataclass
class RunConfig:
    seed: int = 0
    manifest: str | None = None
    output_dir: str = "runs/default"
    deterministic: bool = True
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)


_TUPLE_FIELDS = {
    "included_classes",
    "canvas",
    "curvature",
}
_INT_KEY_DICT_FIELDS = {"n_bundles_per_class", "width_px", "streak_density"}


def _coerce(value, f: dataclasses.Field, path: str):
    name = f.name
    if value is None:
        return None
    if name in _TUPLE_FIELDS:
        return tuple(value)
    if name in _INT_KEY_DICT_FIELDS:
        if not isinstance(value, dict):
            raise ValidationError(f"{path}: expected an object, got {type(value).__name__}")
        out = {}
        for k, v in value.items():
            try:
                ik = int(k)
            except (TypeError, ValueError):
                raise ValidationError(f"{path}: keys must be class codes, got {k!r}") from None
            out[ik] = tuple(v) if isinstance(v, (list, tuple)) else v
        return out
    return value


def _build_dataclass(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"{path or 'config'}: expected an object, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        where = f"{path}." if path else ""
        raise ValidationError(f"unknown config field {where}{unknown[0]!r}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(f.type) or (
            isinstance(f.default_factory, type) and dataclasses.is_dataclass(f.default_factory)
        ):
            sub_cls = f.default_factory if f.default_factory is not dataclasses.MISSING else f.type
            kwargs[name] = _build_dataclass(sub_cls, value, sub)
        else:
            kwargs[name] = _coerce(value, f, sub)
    try:
        return cls(**kwargs)
    except ValidationError as e:
        prefix = f"{path}: " if path else ""
        raise ValidationError(f"{prefix}{e}") from e


def _propagate_seed(doc: dict) -> dict:
    seed = doc.get("seed", 0)
    for key in ("train", "pretrain"):
        sub = doc.setdefault(key, {})
        if isinstance(sub, dict):
            sub.setdefault("seed", seed)
            sampler = sub.setdefault("sampler", {})
            if isinstance(sampler, dict):
                sampler.setdefault("rng_seed", seed)
    return doc


def apply_override(doc: dict, spec: str) -> None:
    """Apply one dotted `path=value` override in place."""
    if "=" not in spec:
        raise ValidationError(f"override {spec!r} must look like section.field=value")
    dotted, _, raw = spec.partition("=")
    keys = [k for k in dotted.strip().split(".") if k]
    if not keys:
        raise ValidationError(f"override {spec!r} has an empty field path")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ValidationError(f"override {spec!r}: {k!r} is not a config section")
        node = nxt
    node[keys[-1]] = value


def load_run_config(
    path: str | Path | None, overrides: list[str] | None = None
) -> RunConfig:
    """Load a RunConfig from a JSON file (or defaults) plus overrides."""
    if path is None:
        doc = {}
    else:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict):
            raise ValidationError(f"config {path}: top level must be an object")
    for spec in overrides or []:
        apply_override(doc, spec)
    _propagate_seed(doc)
    return _build_dataclass(RunConfig, doc, "")


def run_config_to_dict(cfg: RunConfig) -> dict:
    def _plain(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, dict):
            return {str(k): _plain(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [_plain(v) for v in value]
        return value

    return _plain(cfg)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(
    out_path: str | Path, command: str, cfg: RunConfig, inputs: list[str | Path]
) -> None:
    """Snapshot the effective config and input hashes beside a run's outputs."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "effective_config": run_config_to_dict(cfg),
        "input_sha256": {
            str(p): sha256_file(p) for p in sorted(map(str, inputs)) if Path(p).is_file()
        },
    }
    out_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
