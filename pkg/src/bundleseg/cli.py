"""Command-line entry point.

Commands: ingest, synth, sample-preview, pretrain, train, infer, evaluate.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. Every
pipeline command writes a provenance record (effective config + input
hashes) under <output_dir>/logs/.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_mod
from . import evaluation, inference, sampling, synthgen, training, unet
from .errors import ValidationError
from .slide_io import (
    load_manifest,
    load_section,
    manifest_summary,
    save_image,
    save_mask,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for runtime
    # failures, so remap to 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bundleseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a manifest and print section counts")
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--check-files",
        action="store_true",
        help="also open every image/mask/outline and validate shapes",
    )

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10, help="number of sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="run config supplying the synth spec")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V")

    p = sub.add_parser("sample-preview", help="render sampled patches for visual audit")
    p.add_argument("--manifest", required=True)
    p.add_argument("--section", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", default="1,2,3", help="comma-separated class codes")

    for name, help_text in (
        ("pretrain", "reconstruction pre-training on unlabeled sections"),
        ("train", "train one cross-validation fold"),
        ("infer", "sliding-window ensemble inference"),
        ("evaluate", "bundle-level metrics against ground truth"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="run config JSON")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V")
        p.add_argument("--manifest", default=None, help="override config manifest path")
        p.add_argument("--output-dir", default=None, help="override config output_dir")
        if name == "train":
            p.add_argument("--fold", type=int, default=None)
        if name == "infer":
            p.add_argument("--sections", default=None, help="comma-separated section ids")
        if name == "evaluate":
            p.add_argument("--pred-dir", default=None, help="directory of predicted masks")

    return parser


def _load_cfg(args) -> config_mod.RunConfig:
    overrides = list(getattr(args, "overrides", []))
    if getattr(args, "manifest", None):
        overrides.append(f"manifest={args.manifest}")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={args.output_dir}")
    cfg = config_mod.load_run_config(getattr(args, "config", None), overrides)
    if cfg.deterministic:
        import torch

        torch.set_num_threads(1)
    return cfg


def _require_manifest(cfg) -> Path:
    if not cfg.manifest:
        raise ValidationError("no manifest configured; set manifest in the config or --manifest")
    return Path(cfg.manifest)


def _provenance(cfg, command: str, suffix: str = "") -> None:
    out = Path(cfg.output_dir) / "logs" / f"provenance_{command}{suffix}.json"
    inputs = [cfg.manifest] if cfg.manifest else []
    config_mod.write_provenance(out, command, cfg, inputs)


def _cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest)
    if args.check_files:
        for entry in manifest.entries:
            load_section(entry)
    print(manifest_summary(manifest))
    return 0


def _cmd_synth(args) -> int:
    cfg = config_mod.load_run_config(args.config, list(args.overrides))
    spec = cfg.synth
    manifest = synthgen.generate_dataset(spec, args.n, args.out, args.seed)
    print(f"wrote {len(manifest.entries)} sections under {args.out}")
    print(manifest_summary(manifest))
    return 0


def _cmd_sample_preview(args) -> int:
    manifest = load_manifest(args.manifest)
    entry = manifest.get(args.section)
    section, labels, _ = load_section(entry)
    if labels is None:
        raise ValidationError(f"section {args.section!r} has no label mask to preview")
    classes = tuple(int(c) for c in args.classes.split(",") if c)
    target = sampling.binarize_labels(labels, classes)
    cfg = sampling.SamplerConfig(
        patch_size=args.patch_size, patches_per_section=args.n, rng_seed=args.seed
    )
    rng = training.derive_rng(args.seed, "preview", args.section)
    patches = sampling.sample_patches(section, target, cfg, rng)

    tiles = []
    for s in patches:
        lo, hi = s.pixels.min(), s.pixels.max()
        norm = (s.pixels - lo) / (hi - lo) if hi > lo else np.zeros_like(s.pixels)
        rgb = np.stack([norm] * 3, axis=-1)
        rgb[s.target > 0, 0] = 1.0
        tiles.append((rgb * 255).astype(np.uint8))
    cols = min(4, len(tiles))
    rows = (len(tiles) + cols - 1) // cols
    p = args.patch_size
    sheet = np.zeros((rows * p, cols * p, 3), dtype=np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        sheet[r * p : (r + 1) * p, c * p : (c + 1) * p] = tile
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet, "RGB").save(args.out)
    print(f"wrote {len(tiles)} patch previews to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(_require_manifest(cfg))
    out = Path(cfg.output_dir)
    log_path = out / "logs" / "pretrain_metrics.ndjson"
    model = training.pretrain_reconstruction(
        manifest, cfg.pretrain, cfg.unet, log_path=log_path, progress=_progress("pretrain")
    )
    ckpt = out / "checkpoints" / "pretrain.ckpt"
    unet.save_checkpoint(model, ckpt)
    _provenance(cfg, "pretrain")
    print(f"wrote {ckpt}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(_require_manifest(cfg))
    out = Path(cfg.output_dir)
    fold = args.fold
    tag = "all" if fold is None else f"fold{fold}"
    log_path = out / "logs" / f"train_{tag}_metrics.ndjson"
    if cfg.train.pretrained_checkpoint:
        pre = unet.load_checkpoint(cfg.train.pretrained_checkpoint)
        model = training.fine_tune(
            pre, manifest, fold, cfg.train, cfg.unet, log_path=log_path,
            progress=_progress(f"train {tag}"),
        )
    else:
        model = training.train_fold(
            manifest, fold, cfg.train, cfg.unet, log_path=log_path,
            progress=_progress(f"train {tag}"),
        )
    ckpt = out / "checkpoints" / f"{tag}.ckpt"
    unet.save_checkpoint(model, ckpt)
    _provenance(cfg, "train", f"_{tag}")
    print(f"wrote {ckpt}")
    return 0


def _progress(label: str):
    def cb(epoch, train_loss, holdout_loss):
        if epoch == 1 or epoch % 25 == 0:
            held = "" if holdout_loss is None else f"  holdout {holdout_loss:.4f}"
            print(f"[{label}] epoch {epoch}: loss {train_loss:.4f}{held}", flush=True)

    return cb


def _ensemble_paths(cfg) -> list[str]:
    if cfg.inference.ensemble:
        return list(cfg.inference.ensemble)
    ckpt_dir = Path(cfg.output_dir) / "checkpoints"
    found = sorted(str(p) for p in ckpt_dir.glob("fold*.ckpt"))
    if not found:
        found = sorted(str(p) for p in ckpt_dir.glob("all.ckpt"))
    if not found:
        raise ValidationError(
            f"no ensemble configured and no checkpoints found under {ckpt_dir}"
        )
    return found


def _cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(_require_manifest(cfg))
    out = Path(cfg.output_dir)
    models = [unet.load_checkpoint(p) for p in _ensemble_paths(cfg)]

    if args.sections:
        wanted = [s for s in args.sections.split(",") if s]
        entries = [manifest.get(s) for s in wanted]
    else:
        entries = manifest.by_split("test")
        if not entries:
            raise ValidationError("manifest has no test sections; pass --sections")

    pred_dir = out / "predictions"
    for entry in entries:
        section, _, _ = load_section(entry, load_labels=False)
        pmap = inference.predict_section(cfg.inference, section, models)
        mask = inference.postprocess(cfg.inference, pmap)
        save_image(pred_dir / f"{entry.section_id}_prob.tif", pmap.probs.astype(np.float32))
        save_mask(pred_dir / f"{entry.section_id}_mask.png", mask)
        overlay = inference.render_overlay(section.pixels, mask)
        Image.fromarray(overlay, "RGB").save(pred_dir / f"{entry.section_id}_overlay.png")
        print(f"predicted {entry.section_id}: {int(mask.sum())} foreground px")
    _provenance(cfg, "infer")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    manifest = load_manifest(_require_manifest(cfg))
    out = Path(cfg.output_dir)
    pred_dir = Path(args.pred_dir) if args.pred_dir else out / "predictions"

    entries = [e for e in manifest.by_split("test") if e.label_path is not None]
    if not entries:
        raise ValidationError("manifest has no labeled test sections to evaluate")
    missing = [
        e.section_id
        for e in entries
        if not (pred_dir / f"{e.section_id}_mask.png").is_file()
    ]
    if missing:
        raise ValidationError(
            f"missing predicted masks under {pred_dir} for sections: {', '.join(missing)}"
        )

    counts = []
    for entry in entries:
        _, labels, outline = load_section(entry)
        pred = np.asarray(Image.open(pred_dir / f"{entry.section_id}_mask.png"))
        counts.append(evaluation.evaluate_section(pred, labels, outline))
    report = evaluation.build_report(counts)
    report_path = out / "reports" / "eval.json"
    evaluation.save_report(report, report_path)
    _provenance(cfg, "evaluate")
    print(evaluation.format_report_table(report))
    print(f"\nwrote {report_path}")
    return 0


_COMMANDS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "sample-preview": _cmd_sample_preview,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as e:
        traceback.print_exc()
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
